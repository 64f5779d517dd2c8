use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use gesture_video::diffusion::attention::Attention;
use gesture_video::diffusion::{
    checkpoint, concat_reference_attention, gamma_of, gamma_scalar, AttentionMode, ControlResiduals, FeatureBank,
    GestureVideoModel, ModelConfig, ParamGroup,
};
use gesture_video::imaging::Mask;
use proptest::prelude::*;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        patch: 4,
        channels: vec![16, 32],
        heads: 2,
        groups: 4,
        context_dim: 8,
        ..Default::default()
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn rand_image(cfg: &ModelConfig, b: usize, seed: u64, dtype: DType) -> Tensor {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    gesture_video::training::normal_tensor(&mut rng, &[b, 3, cfg.height, cfg.width], dtype, &Device::Cpu).unwrap()
}

#[test]
fn neutral_conditioning_is_bitwise_bare_denoiser() {
    let dev = Device::Cpu;
    for cfg in [small_cfg(), ModelConfig::default()] {
        let m = GestureVideoModel::new(&cfg, 3, DType::F32, &dev).unwrap();
        let x = rand_image(&cfg, 2, 1, DType::F32);
        let t = [10.0, 700.0];
        let bank = FeatureBank::empty(&cfg, DType::F32, &dev).unwrap();
        let ctrl = ControlResiduals::zeros(&cfg, 2, DType::F32, &dev).unwrap();
        let a = m.backbone_forward(&x, &t, &bank, &ctrl, AttentionMode::PerFrame).unwrap();
        let b = m.bare_forward(&x, &t).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(av.iter().zip(&bv).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn output_shape_matches_input_across_configs() {
    let dev = Device::Cpu;
    let cfgs = [
        small_cfg(),
        ModelConfig {
            height: 32,
            width: 48,
            patch: 2,
            channels: vec![8, 16, 16],
            attention_from: 1,
            heads: 1,
            groups: 4,
            context_dim: 4,
        },
        ModelConfig::default(),
    ];
    for cfg in cfgs {
        let m = GestureVideoModel::new(&cfg, 0, DType::F32, &dev).unwrap();
        let x = rand_image(&cfg, 1, 2, DType::F32);
        let bank = m.reference_forward(&x, &Mask::filled(cfg.width as u32, cfg.height as u32, true)).unwrap();
        assert_eq!(bank.len(), cfg.attention_layers().len());
        for (l, (c, (h, w))) in bank.layers.iter().zip(cfg.attention_layers()) {
            assert_eq!(l.tokens.dims(), &[1, h * w, c]);
            assert_eq!(l.flags.len(), h * w);
        }
        let ctrl = m.controlnet_forward(&x, &x, &[5.0]).unwrap();
        let y = m.backbone_forward(&x, &[5.0], &bank, &ctrl, AttentionMode::PerFrame).unwrap();
        assert_eq!(y.dims(), x.dims());
    }
}

#[test]
fn control_residuals_are_zero_at_init_for_any_skeleton() {
    let dev = Device::Cpu;
    let cfg = small_cfg();
    let m = GestureVideoModel::new(&cfg, 1, DType::F32, &dev).unwrap();
    let x = rand_image(&cfg, 1, 3, DType::F32);
    let black = Tensor::full(-1f32, (1, 3, cfg.height, cfg.width), &dev).unwrap();
    let other = rand_image(&cfg, 1, 4, DType::F32);
    let a = m.controlnet_forward(&black, &x, &[100.0]).unwrap();
    let b = m.controlnet_forward(&other, &x, &[100.0]).unwrap();
    assert_eq!(a.blocks.len(), cfg.decoder_block_shapes().len());
    for (ra, rb) in a.blocks.iter().zip(&b.blocks) {
        assert_eq!(ra.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(max_abs(ra, rb), 0.0);
    }
}

#[test]
fn loaded_nonzero_projections_keep_decoder_shapes() {
    let dev = Device::Cpu;
    let cfg = ModelConfig::default();
    let m = GestureVideoModel::new(&cfg, 2, DType::F32, &dev).unwrap();
    let mut tensors: HashMap<String, Tensor> =
        m.params().iter().map(|(n, p)| (n.clone(), p.tensor.clone())).collect();
    let mut touched = 0;
    for (name, t) in tensors.iter_mut() {
        if name.starts_with("control.zero.") || name.starts_with("control.hint.2") {
            *t = (t.ones_like().unwrap() * 0.01).unwrap();
            touched += 1;
        }
    }
    assert!(touched >= 2 * cfg.channels.len());
    let dir = tempfile::tempdir().unwrap();
    let loaded = GestureVideoModel::from_tensors(&cfg, tensors, DType::F32, &dev).unwrap();
    let path = dir.path().join("nz.bin");
    let sched = gesture_video::diffusion::build_schedule(10, gesture_video::diffusion::ScheduleKind::Linear).unwrap();
    checkpoint::save(&path, &loaded, sched.descriptor(), 0).unwrap();
    let back = checkpoint::load(&path, DType::F32, &dev).unwrap().model;
    let x = rand_image(&cfg, 2, 5, DType::F32);
    let res = back.controlnet_forward(&x, &x, &[3.0, 4.0]).unwrap();
    let shapes: Vec<_> = res.blocks.iter().map(|b| b.dims().to_vec()).collect();
    let want: Vec<_> = cfg.decoder_block_shapes().into_iter().map(|(c, h, w)| vec![2, c, h, w]).collect();
    assert_eq!(shapes, want);
    assert!(res.blocks.iter().all(|b| b.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0));
}

#[test]
fn perturbing_one_reference_token_moves_the_prediction() {
    let dev = Device::Cpu;
    let cfg = small_cfg();
    let m = GestureVideoModel::new(&cfg, 4, DType::F64, &dev).unwrap();
    let img = rand_image(&cfg, 1, 6, DType::F64);
    let x = rand_image(&cfg, 1, 7, DType::F64);
    let bank = m.reference_forward(&img, &Mask::filled(32, 32, false)).unwrap();
    let ctrl = ControlResiduals::zeros(&cfg, 1, DType::F64, &dev).unwrap();
    let base = m.backbone_forward(&x, &[50.0], &bank, &ctrl, AttentionMode::PerFrame).unwrap();
    for layer in [0, bank.len() - 1] {
        let mut bumped = bank.clone();
        let toks = &bank.layers[layer].tokens;
        let delta = Tensor::zeros(toks.dims(), DType::F64, &dev)
            .unwrap()
            .slice_assign(&[0..1, 0..1, 0..1], &Tensor::full(1e-3, (1, 1, 1), &dev).unwrap())
            .unwrap();
        bumped.layers[layer].tokens = (toks + delta).unwrap();
        let moved = m.backbone_forward(&x, &[50.0], &bumped, &ctrl, AttentionMode::PerFrame).unwrap();
        assert!(max_abs(&base, &moved) > 0.0, "layer {layer}");
    }
}

/// Fraction of pixels of cell (r, c) covered by the mask, by direct count.
fn coverage(mask: &Mask, rows: usize, cols: usize, r: usize, c: usize) -> f64 {
    let (h, w) = (mask.height() as usize, mask.width() as usize);
    let (y0, y1) = (r * h / rows, (r + 1) * h / rows);
    let (x0, x1) = (c * w / cols, (c + 1) * w / cols);
    let mut n = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            n += mask.get(x as u32, y as u32) as usize;
        }
    }
    n as f64 / ((y1 - y0) * (x1 - x0)) as f64
}

#[test]
fn face_flags_follow_mask_coverage() {
    let dev = Device::Cpu;
    let cfg = ModelConfig::default();
    let m = GestureVideoModel::new(&cfg, 0, DType::F32, &dev).unwrap();
    let img = rand_image(&cfg, 1, 8, DType::F32);
    let none = m.reference_forward(&img, &Mask::filled(64, 64, false)).unwrap();
    assert!(none.layers.iter().all(|l| l.flags.iter().all(|f| !f)));
    let all = m.reference_forward(&img, &Mask::filled(64, 64, true)).unwrap();
    assert!(all.layers.iter().all(|l| l.flags.iter().all(|f| *f)));

    // one coarsest-grid cell (16x16 pixels) exactly
    let cell = Mask::from_fn(64, 64, |x, y| (16..32).contains(&x) && (32..48).contains(&y));
    let bank = m.reference_forward(&img, &cell).unwrap();
    let coarse = cfg.attention_layers().iter().map(|(_, (h, _))| *h).min().unwrap();
    for l in &bank.layers {
        let (rows, cols) = l.grid;
        for r in 0..rows {
            for c in 0..cols {
                assert_eq!(l.flags[r * cols + c], coverage(&cell, rows, cols, r, c) > 0.5);
            }
        }
        if rows == coarse {
            assert_eq!(l.flags.iter().filter(|f| **f).count(), 1);
        }
    }
}

#[test]
fn freeze_partition_accounts_for_every_parameter() {
    let m = GestureVideoModel::new(&small_cfg(), 0, DType::F32, &Device::Cpu).unwrap();
    let report = gesture_video::training::freeze_check(&m).unwrap();
    let groups = [ParamGroup::Backbone, ParamGroup::Reference, ParamGroup::Control, ParamGroup::NullContext];
    let sum: usize = groups.iter().map(|g| m.params().group_numel(*g)).sum();
    assert_eq!(report.total_params, sum);
    assert_eq!(report.trainable_params, m.params().group_numel(ParamGroup::Reference));
    assert_eq!(report.entries.len(), m.params().len());
}

#[test]
fn freeze_check_names_a_misflagged_parameter() {
    let mut m = GestureVideoModel::new(&small_cfg(), 0, DType::F32, &Device::Cpu).unwrap();
    let name = "backbone.conv_in.weight";
    m.params_mut().set_trainable(name, true).unwrap();
    let err = gesture_video::training::freeze_check(&m).unwrap_err().to_string();
    assert!(err.contains(name), "{err}");
}

#[test]
fn gamma_derivative_is_sigmoid() {
    for th in [-8.0, -4.0, -1.0, -0.1, 0.0, 0.2, 1.5, 6.0] {
        let v = Var::new(&[th][..], &Device::Cpu).unwrap();
        let g = gamma_of(v.as_tensor()).unwrap().sum_all().unwrap();
        let grads = g.backward().unwrap();
        let analytic = grads.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
        let h = 1e-5;
        let fd = (gamma_scalar(th + h) - gamma_scalar(th - h)) / (2.0 * h);
        let sigmoid = 1.0 / (1.0 + (-th as f64).exp());
        assert!((analytic - sigmoid).abs() / sigmoid < 1e-12, "{th}");
        assert!((analytic - fd).abs() / fd.abs() < 1e-5, "{th}: {analytic} vs {fd}");
    }
}

fn random_attention(seed: u64, dim: usize, heads: usize) -> Attention {
    let dev = Device::Cpu;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut w = || {
        (gesture_video::training::normal_tensor(&mut rng, &[dim, dim], DType::F64, &dev).unwrap() / (dim as f64).sqrt())
            .unwrap()
    };
    Attention::from_weights(heads, w(), w(), w(), w()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_exceeds_one(theta in -30.0f64..60.0) {
        prop_assert!(gamma_scalar(theta) > 1.0);
        let t = Tensor::new(&[theta], &Device::Cpu).unwrap();
        prop_assert!(gamma_of(&t).unwrap().to_vec1::<f64>().unwrap()[0] > 1.0);
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, n in 1usize..9, m in 0usize..9, heads in 1usize..3) {
        let dim = 4;
        let attn = random_attention(seed, dim, heads);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0xabc);
        let toks = gesture_video::training::normal_tensor(&mut rng, &[2, n, dim], DType::F64, &Device::Cpu).unwrap();
        let refs = gesture_video::training::normal_tensor(&mut rng, &[1, m, dim], DType::F64, &Device::Cpu).unwrap();
        let kv = Tensor::cat(&[&toks, &refs.broadcast_as((2, m, dim)).unwrap().contiguous().unwrap()], 1).unwrap();
        let p = attn.probabilities(&toks, &kv).unwrap();
        prop_assert_eq!(p.dims(), &[2, heads, n, n + m]);
        let sums = p.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let out = concat_reference_attention(&attn, &toks, &refs).unwrap();
        prop_assert_eq!(out.dims(), &[2, n, dim]);
    }
}
