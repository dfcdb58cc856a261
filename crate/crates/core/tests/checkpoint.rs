use seqdiff::data::{encode_pairs, generate_synth, SynthConfig, SynthTask};
use seqdiff::tokenizer::{train_bpe, Vocab};
use seqdiff::training::{Checkpoint, TrainConfig, Trainer};
use seqdiff::Error;

fn trained() -> (Vocab, Checkpoint) {
    let records = generate_synth(&SynthConfig {
        task: SynthTask::Copy,
        pairs: 10,
        vocab: 6,
        min_len: 1,
        max_len: 3,
        seed: 4,
    })
    .unwrap();
    let corpus: Vec<&str> = records.iter().flat_map(|p| [p.src.as_str(), p.trg.as_str()]).collect();
    let vocab = train_bpe(&corpus, 50).unwrap();
    let cfg = TrainConfig {
        diffusion_steps: 20,
        d_emb: 8,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        batch_size: 4,
        steps: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, &vocab, encode_pairs(&records, &vocab, 16), Vec::new()).unwrap();
    for _ in 0..5 {
        tr.train_step().unwrap();
    }
    (vocab, tr.checkpoint())
}

fn expect_checkpoint_error(bytes: &[u8], needle: &str) {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains(needle), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt checkpoint accepted"),
    }
}

#[test]
fn bytes_roundtrip_is_stable() {
    let (vocab, ckpt) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.meta, ckpt.meta);
    assert_eq!(back.meta.step, 5);
    assert!(back.optimizer.is_some());
    assert_eq!(back.vocab().unwrap(), vocab);
    back.verify_vocab(&vocab).unwrap();
}

#[test]
fn file_roundtrip_leaves_no_temporary() {
    let (_, ckpt) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    ckpt.save(&path).unwrap();
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["model.ckpt".to_string()]);
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}

#[test]
fn bad_magic_is_rejected() {
    let (_, ckpt) = trained();
    let mut bytes = ckpt.to_bytes().unwrap();
    bytes[0] = b'X';
    expect_checkpoint_error(&bytes, "magic");
    expect_checkpoint_error(b"DSQ", "magic");
}

#[test]
fn flipped_payload_byte_fails_checksum() {
    let (_, ckpt) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    for pos in [12, bytes.len() / 2, bytes.len() - 40] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        expect_checkpoint_error(&bad, "checksum");
    }
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    expect_checkpoint_error(&bad, "checksum");
}

#[test]
fn truncated_file_is_rejected() {
    let (_, ckpt) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    for keep in [bytes.len() - 1, bytes.len() - 33, bytes.len() / 2, 40] {
        assert!(Checkpoint::from_bytes(&bytes[..keep]).is_err(), "kept {keep}");
    }
}

#[test]
fn wrong_version_is_rejected() {
    let (_, ckpt) = trained();
    let mut bytes = ckpt.to_bytes().unwrap();
    bytes[4] = 9;
    expect_checkpoint_error(&bytes, "version");
}

#[test]
fn mismatched_vocab_is_rejected() {
    let (_, ckpt) = trained();
    let other = train_bpe(&["completely different words here"], 40).unwrap();
    match ckpt.verify_vocab(&other) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("mismatch"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_reports_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.ckpt");
    match Checkpoint::load(&path) {
        Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("absent.ckpt")),
        other => panic!("unexpected {other:?}"),
    }
}
