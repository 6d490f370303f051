use ppf_core::checkpoint::Checkpoint;
use ppf_core::config::TrainConfig;
use ppf_core::train::Trainer;
use ppf_core::Error;

fn tiny() -> TrainConfig {
    TrainConfig::parse(
        "seed = 3\nepochs = 3\nbatch_size = 4\ntrain_samples = 12\ntest_samples = 4\ndepth = 2\nembed_dim = 8\nmlp_ratio = 2\n",
    )
    .unwrap()
}

#[test]
fn roundtrip_is_exact() {
    let mut t = Trainer::new(tiny()).unwrap();
    t.train_epoch().unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut straight = Trainer::new(tiny()).unwrap();
    let logs_a: Vec<String> = straight.run(|_, _| Ok(())).unwrap().iter().map(|m| m.log_line()).collect();

    let mut first = Trainer::new(tiny()).unwrap();
    let mut logs_b = vec![first.train_epoch().unwrap().log_line()];
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    logs_b.extend(resumed.run(|_, _| Ok(())).unwrap().iter().map(|m| m.log_line()));

    assert_eq!(logs_a, logs_b);
    assert_eq!(straight.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
}

#[test]
fn corruption_reports_offsets() {
    let t = Trainer::new(tiny()).unwrap();
    let bytes = t.checkpoint().to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

    for cut in [3usize, 10, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut, "cut {cut} offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("none.ppfk")), Err(Error::Io(_))));
}

#[test]
fn fc_heads_stay_frozen_through_training() {
    let mut t = Trainer::new(tiny()).unwrap();
    let (g, l) = (t.model.bank.fc_global.clone(), t.model.bank.fc_local.clone());
    t.run(|_, _| Ok(())).unwrap();
    assert_eq!(t.model.bank.fc_global, g);
    assert_eq!(t.model.bank.fc_local, l);
    assert!(t.model.params.names().iter().all(|n| !n.contains("fc")));
}
