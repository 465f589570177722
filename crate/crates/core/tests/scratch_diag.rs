//! Scratch diagnostics over a cached calibration run (not part of the suite).

use replaysim_core::attack::SurrogateModel;
use replaysim_core::audio::{load_wav, Waveform};
use replaysim_core::channel::{apply_channel, ChannelParams};
use replaysim_core::ckpt::{load_json, AsvCheckpoint, NrsCheckpoint};
use replaysim_core::eval::Framework;
use replaysim_core::manifest::ExperimentManifest;
use replaysim_core::nrs::nrs_forward;
use replaysim_core::pipeline::{AttackRecords, Pipeline};
use replaysim_core::rng::derive_seed;
use replaysim_core::F;

#[test]
#[ignore]
fn score_decomposition() {
    let root = std::path::PathBuf::from("/root/scratch/calib");
    let mut m = ExperimentManifest::default_desk(20260814);
    m.evaluation.trials = 25;
    let p = Pipeline::new(m.clone(), &root, &root.join("out")).unwrap();
    let run = p.run_dir().to_path_buf();

    let index = p.prepare_data().unwrap();
    let rows_csv = std::fs::read_to_string(run.join("attack/pairs.csv")).unwrap();
    // parse enroll keys from pairs.csv (trial_id,source_speaker,source_utterance,crop_start,crop_len,enroll_speaker,enroll_utterance)
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

    let nrs: NrsCheckpoint<F> = load_json(&run.join("nrs/model.json")).unwrap();
    let eval_seed = m.stage_seed("evaluate", 0);

    // genuine same-speaker trials: clean score vs through-channel score
    for sys_id in ["mel_net", "raw_net"] {
        let ck: AsvCheckpoint<F> = load_json(&run.join(format!("asv/{sys_id}.json"))).unwrap();
        let emb = ck.embedder().unwrap();
        let target = SurrogateModel::asv_only(&emb, ck.threshold);
        let tau = ck.threshold.tau;
        let pool = &index.enroll_pool;
        let mut clean = Vec::new();
        let mut quiet = Vec::new();
        let mut noisy = Vec::new();
        let mut n = 0usize;
        'outer: for a in 0..pool.len() {
            for b in (a + 1)..pool.len() {
                let (ia, ib) = (pool[a], pool[b]);
                if index.utterances[ia].speaker_id != index.utterances[ib].speaker_id {
                    continue;
                }
                let we = index.load_waveform::<F>(ia).unwrap();
                let wt = index.load_waveform::<F>(ib).unwrap();
                let e = target.enroll_embedding(&we).unwrap();
                clean.push(target.score_against(&wt, &e).unwrap() as f64);
                let mut qp = m.channel.clone();
                qp.noise_snr_db = None;
                let cq = apply_channel(&wt, &qp, 0).unwrap();
                quiet.push(target.score_against(&cq, &e).unwrap() as f64);
                let cn = apply_channel(&wt, &m.channel, derive_seed(eval_seed, "diag", n as u64))
                    .unwrap();
                noisy.push(target.score_against(&cn, &e).unwrap() as f64);
                n += 1;
                if n >= 60 {
                    break 'outer;
                }
            }
        }
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let over = v.iter().filter(|&&s| s >= tau).count();
            format!("mean {mean:.4} ≥τ {over}/{}", v.len())
        };
        println!(
            "genuine {sys_id} tau {tau:.4}: clean[{}] chan_quiet[{}] chan_noisy[{}]",
            stats(&clean),
            stats(&quiet),
            stats(&noisy)
        );
    }

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
            let mut digital = Vec::new();
            let mut nrs_pred = Vec::new();
            let mut chan_clean = Vec::new(); // deterministic channel, no noise
            let mut chan_noisy = Vec::new(); // full channel with eval noise seed
            for (t, tr) in rec.trials.iter().enumerate() {
                let adv: Waveform<F> = load_wav(
                    run.join(format!("attack/{}/{sys_id}/{}", fw.as_str(), tr.wav)),
                )
                .unwrap();
                let e = target.enroll_embedding(&enrolls[t]).unwrap();
                let s_dig = target.score_against(&adv, &e).unwrap() as f64;
                let sim = nrs_forward(&nrs.model, &adv).unwrap();
                let s_nrs = target.score_against(&sim, &e).unwrap() as f64;
                let mut quiet = m.channel.clone();
                quiet.noise_snr_db = None;
                let cq = apply_channel(&adv, &quiet, 0).unwrap();
                let s_cq = target.score_against(&cq, &e).unwrap() as f64;
                let cn = apply_channel(&adv, &m.channel, derive_seed(eval_seed, &label, t as u64))
                    .unwrap();
                let s_cn = target.score_against(&cn, &e).unwrap() as f64;
                digital.push(s_dig);
                nrs_pred.push(s_nrs);
                chan_clean.push(s_cq);
                chan_noisy.push(s_cn);
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
                stats(&nrs_pred),
                stats(&chan_clean),
                stats(&chan_noisy)
            );
        }
    }
    let _ = ChannelParams::identity; // keep import if unused elsewhere
}
