use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqdiff::data::{encode_pairs, generate_synth, PairRecord, SynthConfig, SynthTask};
use seqdiff::diffusion::PairedExample;
use seqdiff::schedule::build_sqrt_schedule;
use seqdiff::tokenizer::{train_bpe, Vocab};
use seqdiff::training::{
    batch_loss, final_checkpoint_path, ExampleNoise, ImportanceState, LossItem, LossOptions, TrainConfig, Trainer,
};
use seqdiff::Error;

fn tiny_config(steps: u64) -> TrainConfig {
    TrainConfig {
        diffusion_steps: 50,
        d_emb: 8,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        batch_size: 4,
        dropout: 0.0,
        steps,
        seed: 9,
        log_every: 10,
        eval_every: 50,
        checkpoint_every: 40,
        ..TrainConfig::default()
    }
}

fn tiny_data(pairs: usize) -> (Vocab, Vec<PairRecord>, Vec<PairedExample>) {
    let records = generate_synth(&SynthConfig {
        task: SynthTask::Copy,
        pairs,
        vocab: 6,
        min_len: 1,
        max_len: 3,
        seed: 2,
    })
    .unwrap();
    let corpus: Vec<&str> = records.iter().flat_map(|p| [p.src.as_str(), p.trg.as_str()]).collect();
    let vocab = train_bpe(&corpus, 50).unwrap();
    let data = encode_pairs(&records, &vocab, 16);
    (vocab, records, data)
}

#[test]
fn empty_dataset_is_a_config_error() {
    let (vocab, _, _) = tiny_data(4);
    match Trainer::new(tiny_config(10), &vocab, Vec::new(), Vec::new()) {
        Err(Error::Config(msg)) => assert!(msg.contains("empty"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("empty dataset accepted"),
    }
}

#[test]
fn one_example_loss_drops_within_200_steps() {
    let (vocab, _, data) = tiny_data(1);
    let mut tr = Trainer::new(tiny_config(200), &vocab, data[..1].to_vec(), Vec::new()).unwrap();
    let before = tr.evaluate(&data[..1]).unwrap().total;
    for _ in 0..200 {
        tr.train_step().unwrap();
    }
    let after = tr.evaluate(&data[..1]).unwrap().total;
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn small_dataset_overfits_to_a_quarter_of_initial_loss() {
    let (vocab, _, data) = tiny_data(8);
    let mut tr = Trainer::new(tiny_config(2000), &vocab, data, Vec::new()).unwrap();
    let losses: Vec<f64> = (0..2000).map(|_| tr.train_step().unwrap().loss.total).collect();
    let window = 50;
    let head = losses[..window].iter().sum::<f64>() / window as f64;
    let tail = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    assert!(tail < 0.25 * head, "smoothed loss {head} -> {tail}");
}

#[test]
fn same_seed_gives_identical_runs() {
    let (vocab, _, data) = tiny_data(12);
    let run = || {
        let mut tr = Trainer::new(tiny_config(30), &vocab, data.clone(), Vec::new()).unwrap();
        let losses: Vec<f64> = (0..30).map(|_| tr.train_step().unwrap().loss.total).collect();
        (losses, tr.checkpoint().to_bytes().unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);

    let mut other = tiny_config(30);
    other.seed = 10;
    let mut tr = Trainer::new(other, &vocab, data.clone(), Vec::new()).unwrap();
    let c: Vec<f64> = (0..30).map(|_| tr.train_step().unwrap().loss.total).collect();
    assert_ne!(a, c);
}

#[test]
fn run_writes_metrics_and_checkpoints() {
    let (vocab, _, data) = tiny_data(12);
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(tiny_config(100), &vocab, data.clone(), data[..4].to_vec()).unwrap();
    let mut log = Vec::new();
    let ckpt = tr.run(Some(dir.path()), Some(&mut log as &mut dyn std::io::Write)).unwrap();
    assert_eq!(ckpt.meta.step, 100);

    let text = String::from_utf8(log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let train_lines: Vec<_> = lines.iter().filter(|v| v.get("split").is_none()).collect();
    let eval_lines: Vec<_> = lines.iter().filter(|v| v["split"] == "valid").collect();
    assert_eq!(train_lines.len(), 10);
    assert_eq!(eval_lines.len(), 2);
    for key in ["step", "mse_y", "mse_t1", "round_nll", "reg_zT", "total", "p_t_entropy"] {
        assert!(train_lines[0].get(key).is_some(), "missing {key}");
    }

    for name in ["step-40.ckpt", "step-80.ckpt", "last.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let fin = final_checkpoint_path(dir.path());
    assert!(fin.exists());
    assert_eq!(std::fs::read(&fin).unwrap(), ckpt.to_bytes().unwrap());
    assert!(std::fs::read_dir(dir.path())
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (vocab, _, data) = tiny_data(12);
    let mut straight = Trainer::new(tiny_config(60), &vocab, data.clone(), Vec::new()).unwrap();
    let full: Vec<f64> = (0..60).map(|_| straight.train_step().unwrap().loss.total).collect();

    let mut first = Trainer::new(tiny_config(60), &vocab, data.clone(), Vec::new()).unwrap();
    for _ in 0..25 {
        first.train_step().unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = seqdiff::training::Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(ckpt, data, Vec::new()).unwrap();
    assert_eq!(resumed.step_count(), 25);
    let rest: Vec<f64> = (0..35).map(|_| resumed.train_step().unwrap().loss.total).collect();
    assert_eq!(&full[25..], &rest[..]);
}

#[test]
fn source_embeddings_receive_diffusion_gradient() {
    // A token that only ever appears on the source side still moves mse_y: the denoiser reads
    // the anchored source rows when predicting the target.
    let (vocab, _, _) = tiny_data(4);
    let cfg = tiny_config(1);
    let params = seqdiff::denoiser::init_params(&cfg.model_config(vocab.len()), 3).unwrap();
    let schedule = build_sqrt_schedule(50, 1e-4).unwrap();
    let first = seqdiff::tokenizer::NUM_SPECIALS as u32;
    let (src, trg) = (vec![first, first + 1], vec![first + 2]);
    let only_src = src[0];
    let ex = PairedExample::new(src, trg, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = ExampleNoise::sample(16, cfg.d_emb, &mut rng);
    let mse = |p: &seqdiff::denoiser::ModelParams| {
        let item = LossItem {
            example: &ex,
            t: 20,
            weight: 1.0,
            noise: &noise,
        };
        batch_loss(p, &schedule, &[item], LossOptions::default(), None, false).unwrap().0[0].mse_y
    };
    let base = mse(&params);
    let mut moved = params.clone();
    let d = cfg.d_emb;
    moved.embedding.matrix.data[only_src as usize * d] += 0.5;
    assert!((mse(&moved) - base).abs() > 1e-9);
}

#[test]
fn importance_weighting_is_unbiased_on_two_steps() {
    let mut state = ImportanceState::new(2);
    let (l1, l2) = (0.7, 2.9);
    for _ in 0..seqdiff::training::importance::HISTORY_LEN {
        state.update(1, l1);
        state.update(2, l2);
    }
    // p_t ∝ √E[L_t²] = |L_t| for constant histories
    let p = state.probs();
    assert!((p[0] - l1 / (l1 + l2)).abs() < 1e-12);
    assert!((p[1] - l2 / (l1 + l2)).abs() < 1e-12);

    // the weighted draws estimate the uniform mean of L
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let (t, w) = state.sample(&mut rng);
        assert!((w - 1.0 / (2.0 * p[t - 1])).abs() < 1e-12);
        acc += w * if t == 1 { l1 } else { l2 };
    }
    let uniform = (l1 + l2) / 2.0;
    assert!((acc / n as f64 - uniform).abs() < 0.01 * uniform, "{}", acc / n as f64);
}
