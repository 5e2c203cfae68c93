use caricature_core::data::{read_png_labels, rgb_to_raw, toy_face, RawDomain};
use caricature_core::diffcore::{Shape4, Tensor4};
use caricature_core::trainer::{
    ablate, checkpoint_path, resume, run_until, save_checkpoint, train, trace_path, Checkpoint, LossTrace, RunOptions,
    TrainConfig, TrainData, TrainState, Variant,
};
use caricature_core::Error;
use std::fs;

fn tiny(steps: u64) -> TrainConfig {
    TrainConfig {
        resolution: 16,
        base_channels: 8,
        residual_blocks: 1,
        disc_channels: 4,
        batch_size: 2,
        total_steps: steps,
        seed: 5,
        variant: Variant {
            coarse_grid: 2,
            fine_grid: 4,
            ..Default::default()
        },
        ..TrainConfig::toy()
    }
}

fn data() -> TrainData {
    let domain = |b: bool| {
        RawDomain::from_images(
            (0..4).map(|i| format!("{i:04}")).collect(),
            (0..4).map(|i| rgb_to_raw(&toy_face(i, b, 16), 16)).collect(),
        )
        .unwrap()
    };
    TrainData {
        a: domain(false),
        b: domain(true),
    }
}

fn all_params(s: &TrainState) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        ("g1".to_string(), s.g1.params().flatten()),
        ("g2".to_string(), s.g2.params().flatten()),
    ];
    out.extend(s.discs.iter().map(|d| (d.name.to_string(), d.net.params().flatten())));
    out
}

#[test]
fn same_seed_same_trace() {
    let d = data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, ta) = train(&tiny(4), &d, &RunOptions::in_dir(a.path())).unwrap();
    let (_, tb) = train(&tiny(4), &d, &RunOptions::in_dir(b.path())).unwrap();
    assert_eq!(ta.len(), 4);
    assert_eq!(ta.to_csv(), tb.to_csv());
    assert_eq!(fs::read(trace_path(a.path())).unwrap(), fs::read(trace_path(b.path())).unwrap());
    let mut other = tiny(4);
    other.seed = 6;
    let (_, tc) = train(&other, &d, &RunOptions::default()).unwrap();
    assert_ne!(ta.to_csv(), tc.to_csv());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data();
    let full_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(6);
    cfg.checkpoint_every = 3;
    let (full_state, full) = train(&cfg, &d, &RunOptions::in_dir(full_dir.path())).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut short = cfg.clone();
    short.total_steps = 3;
    train(&short, &d, &RunOptions::in_dir(part_dir.path())).unwrap();
    let (resumed_state, resumed) =
        resume(&checkpoint_path(part_dir.path(), 3), &cfg, &d, &RunOptions::in_dir(part_dir.path())).unwrap();
    assert_eq!(resumed.to_csv(), full.to_csv());
    assert_eq!(all_params(&resumed_state), all_params(&full_state));
    assert!(fs::read(checkpoint_path(part_dir.path(), 6)).unwrap() == fs::read(checkpoint_path(full_dir.path(), 6)).unwrap());
    // The short run's final checkpoint holds the long run's step-3 state;
    // only the stored run length differs.
    let a = Checkpoint::load(&checkpoint_path(part_dir.path(), 3)).unwrap();
    let b = Checkpoint::load(&checkpoint_path(full_dir.path(), 3)).unwrap();
    assert!(a.params == b.params && a.moments == b.moments && a.opt_steps == b.opt_steps);
    assert_eq!((a.step, a.rng_seed, a.rng_word_pos), (b.step, b.rng_seed, b.rng_word_pos));
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (state, trace) = train(&tiny(0), &data(), &RunOptions::in_dir(dir.path())).unwrap();
    assert!(trace.is_empty());
    let ck = Checkpoint::load(&checkpoint_path(dir.path(), 0)).unwrap();
    let init = TrainState::new(tiny(0)).unwrap();
    assert_eq!(ck, Checkpoint::capture(&init));
    assert_eq!(all_params(&state), all_params(&init));
    assert_eq!(ck.step, 0);
}

#[test]
fn checkpoint_file_round_trip_and_continuation() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = train(&tiny(2), &d, &RunOptions::default()).unwrap();
    let p1 = dir.path().join("a.dptc");
    let p2 = dir.path().join("b.dptc");
    save_checkpoint(&state, &p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap().restore(&tiny(2)).unwrap();
    assert_eq!(all_params(&loaded), all_params(&state));
    save_checkpoint(&loaded, &p2).unwrap();
    assert!(fs::read(&p1).unwrap() == fs::read(&p2).unwrap());

    let continue_ten = || {
        let mut s = Checkpoint::load(&p1).unwrap().restore(&tiny(12)).unwrap();
        let mut t = LossTrace::default();
        run_until(&mut s, &d, 12, &RunOptions::default(), &mut t).unwrap();
        t
    };
    let (t1, t2) = (continue_ten(), continue_ten());
    assert_eq!(t1.len(), 10);
    assert_eq!(t1.to_csv(), t2.to_csv());

    let bytes = fs::read(&p1).unwrap();
    fs::write(&p2, &bytes[..bytes.len() - 9]).unwrap();
    assert!(Checkpoint::load(&p2).unwrap_err().to_string().contains("corrupt checkpoint"));
    let mut changed = tiny(2);
    changed.learning_rate = 1e-3;
    assert!(matches!(Checkpoint::load(&p1).unwrap().restore(&changed), Err(Error::Checkpoint(_))));
}

#[test]
fn disabled_terms_leave_only_the_adversarial_mix() {
    let d = data();
    let mut cfg = tiny(3);
    cfg.variant.use_cyc = false;
    cfg.variant.use_percep = false;
    let (_, t) = train(&cfg, &d, &RunOptions::default()).unwrap();
    for r in &t.reports {
        for dir in [r.ab, r.ba] {
            assert!((dir.total_g - dir.adv_g).abs() <= 1e-12, "{dir:?}");
            assert!(dir.cyc > 0.0);
        }
    }
    let (_, t) = train(&tiny(3), &d, &RunOptions::default()).unwrap();
    for r in &t.reports {
        for dir in [r.ab, r.ba] {
            let expect = dir.adv_g + 10.0 * dir.cyc + 2.0 * dir.percep;
            assert!((dir.total_g - expect).abs() <= 1e-12 * expect.max(1.0), "{dir:?}");
        }
        assert!(r.ab.percep > 0.0);
        assert_eq!(r.ba.percep, 0.0);
    }
}

#[test]
fn one_step_moves_every_enabled_network() {
    for (coarse, fine, count) in [(true, true, 4), (false, true, 2), (true, false, 2)] {
        let mut cfg = tiny(1);
        cfg.variant.use_coarse = coarse;
        cfg.variant.use_fine = fine;
        let init = TrainState::new(cfg.clone()).unwrap();
        let (after, _) = train(&cfg, &data(), &RunOptions::default()).unwrap();
        assert_eq!(after.discs.len(), count);
        for ((name, a), (_, b)) in all_params(&init).iter().zip(all_params(&after)) {
            assert_ne!(a, &b, "{name} did not move");
        }
        assert_eq!(after.perception.checksum(), init.perception.checksum());
    }
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(4);
    cfg.checkpoint_every = 2;
    cfg.sample_every = 2;
    train(&cfg, &data(), &RunOptions::in_dir(dir.path())).unwrap();
    for step in [2, 4] {
        assert!(checkpoint_path(dir.path(), step).exists());
        let grid = dir.path().join("samples").join(format!("step_{step:06}.png"));
        let labels = read_png_labels(&grid).unwrap();
        assert!(labels.contains(&("step".into(), step.to_string())));
        let img = image::open(&grid).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 16, 4 * 16));
    }
    let text = fs::read_to_string(trace_path(dir.path())).unwrap();
    assert!(text.starts_with("step,dir,adv_g,adv_dc,adv_df,cyc,percep,total\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert_eq!(LossTrace::read(&trace_path(dir.path())).unwrap().len(), 4);
}

#[test]
fn non_finite_loss_halts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = data();
    for img in &mut d.a.images {
        img.data_mut()[0] = f64::NAN;
    }
    let err = train(&tiny(3), &d, &RunOptions::in_dir(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("trace written to") && msg.contains("last checkpoint"), "{msg}");
    assert!(trace_path(dir.path()).exists());
}

#[test]
fn ablation_matrix_runs_and_labels_grids() {
    let dir = tempfile::tempdir().unwrap();
    let runs = ablate(&tiny(1), &data(), &[(2, 4), (2, 8)], Some(dir.path())).unwrap();
    assert_eq!(runs.len(), 14);
    for r in &runs {
        assert!(trace_path(&dir.path().join(&r.spec.id)).exists(), "{}", r.spec.id);
        let expect = 2 * r.spec.variant.discriminator_count();
        assert_eq!(r.discriminators, expect, "{}", r.spec.id);
    }
    let labels = read_png_labels(&dir.path().join("loss_variants.png")).unwrap();
    assert_eq!(labels.len(), 13);
    assert_eq!(labels[0], ("col0".into(), "input".into()));
    assert!(labels.contains(&("col1".into(), "coarse_cyc_percep".into())));
    let grid = read_png_labels(&dir.path().join("grid_sizes.png")).unwrap();
    assert_eq!(grid[2], ("col2".into(), "grid_c2_f8".into()));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 15);

    let err = ablate(&tiny(1), &data(), &[(4, 2)], None).unwrap_err().to_string();
    assert!(err.contains("ablation.grid_pairs"), "{err}");
}

#[test]
fn translate_shapes() {
    let s = TrainState::new(tiny(0)).unwrap();
    let x = Tensor4::zeros(Shape4::new(1, 3, 16, 16));
    assert_eq!(s.translate(&x).unwrap().shape(), x.shape());
    assert!(s.translate(&Tensor4::zeros(Shape4::new(1, 3, 18, 18))).is_err());
}
