use mmfuse_autograd::nn::Mode;
use mmfuse_autograd::{grad_check_params, EntryKind, Tape, Tensor};
use mmfuse_core::cam::{mm_cams, single_cams};
use mmfuse_core::checkpoint;
use mmfuse_core::models::{BackboneConfig, MmCnn, SingleModalCnn};
use mmfuse_core::{Class, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(side: usize) -> BackboneConfig {
    BackboneConfig {
        input_side: side,
        stem_width: 4,
        widths: vec![4, 4, 8, 8],
        blocks_per_stage: 1,
        total_stride: 32,
    }
}

fn input<T: mmfuse_autograd::Real>(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor<T> {
    let data = (0..n * 3 * side * side)
        .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(&[n, 3, side, side], data)
}

#[test]
fn feature_side_and_fusion_width_follow_the_config() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for side in [32, 64, 96, 128] {
        let config = tiny(side);
        let mut model = MmCnn::<f32>::new(&config, 1).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(input(&mut rng, 2, side));
        let b = tape.constant(input(&mut rng, 2, side));
        let out = model.forward(&mut tape, a, b, Mode::Eval).unwrap();
        let m = side / 32;
        assert_eq!(tape.shape(out.cfp_features), &[2, 8, m, m]);
        assert_eq!(tape.shape(out.oct_features), &[2, 8, m, m]);
        assert_eq!(tape.shape(out.fused), &[2, 16]);
        assert_eq!(tape.shape(out.scores), &[2, 4]);
    }
}

/// Brute-force `sum_k w_k f_k(x, y) / m^2` for one stream.
fn cam_oracle(features: &[f32], c: usize, m: usize, head: &[f32], row0: usize, class: usize) -> Vec<f64> {
    let mut grid = vec![0.0; m * m];
    for (p, g) in grid.iter_mut().enumerate() {
        for k in 0..c {
            *g += head[(row0 + k) * 4 + class] as f64 * features[k * m * m + p] as f64;
        }
        *g /= (m * m) as f64;
    }
    grid
}

#[test]
fn cam_grids_match_brute_force_and_sum_to_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for draw in 0..20 {
        let side = [64, 96][draw % 2];
        let mut model = MmCnn::<f32>::new(&tiny(side), draw as u64).unwrap();
        let (a, b) = (input::<f32>(&mut rng, 3, side), input::<f32>(&mut rng, 3, side));
        let results = mm_cams(&mut model, &a, &b).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let out = model.forward(&mut tape, av, bv, Mode::Eval).unwrap();
        let head = model.store.value(model.head).data().to_vec();
        let m = side / 32;
        for (i, r) in results.iter().enumerate() {
            assert!(r.fusion_residual() < 1e-4 && r.stream_residual() < 1e-4, "draw {draw}");
            let ff = tape.value(out.cfp_features).select(i);
            let fo = tape.value(out.oct_features).select(i);
            for c in 0..4 {
                let want_f = cam_oracle(ff.data(), 8, m, &head, 0, c);
                let want_o = cam_oracle(fo.data(), 8, m, &head, 8, c);
                for (g, w) in r.cfp[c]
                    .grid
                    .iter()
                    .zip(&want_f)
                    .chain(r.oct[c].grid.iter().zip(&want_o))
                {
                    assert!((g - w).abs() < 1e-9);
                }
                let s = tape.value(out.scores).data()[i * 4 + c] as f64;
                assert!((s - r.cfp[c].total() - r.oct[c].total()).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn single_stream_cam_sums_to_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut model = SingleModalCnn::<f32>::new(Modality::Oct, &tiny(64), 3).unwrap();
    let x = input::<f32>(&mut rng, 4, 64);
    for class in Class::ALL {
        for (cam, logit) in single_cams(&mut model, &x, class).unwrap() {
            assert!((cam.total() - logit).abs() < 1e-4);
            assert!((cam.source_logit - logit).abs() < 1e-4);
        }
    }
}

#[test]
fn two_stream_composite_gradients_in_f64() {
    let config = BackboneConfig {
        input_side: 64,
        stem_width: 2,
        widths: vec![2, 3, 3, 4],
        blocks_per_stage: 1,
        total_stride: 32,
    };
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = MmCnn::<f64>::new(&config, seed).unwrap();
        let a = input::<f64>(&mut rng, 2, 64);
        let b = input::<f64>(&mut rng, 2, 64);
        let labels = vec![rng.gen_range(0..4), rng.gen_range(0..4)];
        let trainable: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.kind(id) == EntryKind::Trainable)
            .collect();
        let coords: Vec<_> = (0..8)
            .map(|_| {
                let id = trainable[rng.gen_range(0..trainable.len())];
                (id, rng.gen_range(0..model.store.value(id).numel()))
            })
            .collect();
        let err = grad_check_params(
            &mut model,
            |m| &mut m.store,
            |m, tape| {
                let av = tape.constant(a.clone());
                let bv = tape.constant(b.clone());
                let out = m.forward(tape, av, bv, Mode::Train).unwrap();
                tape.softmax_cross_entropy(out.scores, &labels)
            },
            &coords,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("two-stream composite: worst relative error {worst:.2e}");
}

#[test]
fn checkpoint_reload_gives_identical_forward() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut model = MmCnn::<f32>::new(&tiny(64), 9).unwrap();
    // Move the batch-norm buffers away from their initial values.
    let mut tape = Tape::new();
    let a = tape.constant(input(&mut rng, 4, 64));
    let b = tape.constant(input(&mut rng, 4, 64));
    model.forward(&mut tape, a, b, Mode::Train).unwrap();
    let path = dir.path().join("mm.json");
    checkpoint::save(&model, &path).unwrap();
    let mut loaded: MmCnn<f32> = checkpoint::load(&path).unwrap();
    let (x, y) = (input::<f32>(&mut rng, 3, 64), input::<f32>(&mut rng, 3, 64));
    assert_eq!(model.predict(&x, &y).unwrap(), loaded.predict(&x, &y).unwrap());
    assert!(checkpoint::load::<SingleModalCnn<f32>>(&path).is_err());
}
