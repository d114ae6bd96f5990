use cmunet::loss::{segmentation_loss, total_loss};
use cmunet::model::{CmUnet, ModelConfig};
use cmunet::nn::{Conv2d, Mode};
use cmunet_tensor::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(b: usize, s: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[b, 3, s, s], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// ResNet basic-block trunk: 7x7 stem, 3x3 convs, 1x1 projection shortcuts,
/// and two affine parameters per batch-norm channel.
fn resnet_trunk_params(cin: usize, channels: &[usize], blocks: &[usize]) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(cin, channels[0], 7) + bn(channels[0]);
    let mut prev = channels[0];
    for (s, (&c, &n)) in channels.iter().zip(blocks).enumerate() {
        for b in 0..n {
            let i = if b == 0 { prev } else { c };
            total += conv(i, c, 3) + bn(c) + conv(c, c, 3) + bn(c);
            if b == 0 && (s > 0 || i != c) {
                total += conv(i, c, 1) + bn(c);
            }
        }
        prev = c;
    }
    total
}

#[test]
fn analytic_trunk_formula_reproduces_resnet18() {
    // Published ResNet-18 total (11,689,512) minus its 512x1000 classifier.
    assert_eq!(resnet_trunk_params(3, &[64, 128, 256, 512], &[2, 2, 2, 2]), 11_689_512 - 513_000);
}

#[test]
fn paper_scale_parameter_budget() {
    let m = CmUnet::<f32>::new(ModelConfig::paper_scale()).unwrap();
    let enc = m.encoder_parameter_count() as f64;
    let analytic = resnet_trunk_params(3, &[64, 128, 256, 512], &[2, 2, 2, 2]) as f64;
    assert!((enc - analytic).abs() / analytic <= 0.02, "encoder {enc} vs {analytic}");
    assert!((enc - 11.18e6).abs() / 11.18e6 <= 0.02);
    let total = m.count_parameters() as f64;
    assert!((total - 12.89e6).abs() / 12.89e6 <= 0.15, "total {total}");
    let breakdown: usize = m.parameter_breakdown().iter().map(|(_, n)| n).sum();
    assert_eq!(breakdown, m.count_parameters());
}

#[test]
fn small_layer_counts() {
    let mut store = ParamStore::<f32>::new();
    Conv2d::pointwise(&mut store, "lin", 3, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(store.count(), 20);
}

#[test]
fn mini_model_shapes() {
    let m = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let x = input(2, 64, 1);
    let feats = m.encoder.forward(&x, Mode::Eval).unwrap();
    let sizes: Vec<(usize, usize)> = feats.levels.iter().map(|f| (f.shape()[1], f.shape()[2])).collect();
    assert_eq!(sizes, vec![(16, 16), (32, 8), (64, 4), (128, 2)]);
    let out = m.forward(&x, Mode::Eval).unwrap();
    assert_eq!(out.final_logits.shape(), &[2, 4, 64, 64]);
    let aux: Vec<&[usize]> = out.aux_logits.iter().map(|a| a.shape()).collect();
    assert_eq!(aux, vec![&[2, 4, 4, 4][..], &[2, 4, 8, 8], &[2, 4, 16, 16]]);
}

#[test]
fn output_matches_input_resolution() {
    let cfg = ModelConfig { encoder_channels: vec![8, 16, 16, 32], blocks_per_stage: vec![1, 1, 1, 1], ..ModelConfig::default() };
    let m = CmUnet::<f32>::new(cfg).unwrap();
    for (h, w) in [(32, 32), (32, 96), (64, 32)] {
        let x = Tensor::zeros(&[1, 3, h, w]);
        assert_eq!(m.forward(&x, Mode::Eval).unwrap().final_logits.shape(), &[1, 4, h, w]);
    }
    assert!(m.forward(&Tensor::zeros(&[1, 3, 48, 64]), Mode::Eval).is_err());
}

#[test]
fn zero_input_gives_zero_features_in_eval_mode() {
    let m = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let feats = m.encoder.forward(&Tensor::zeros(&[1, 3, 64, 64]), Mode::Eval).unwrap();
    assert!(feats.levels.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn eval_forward_is_pure() {
    let m = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let x = input(2, 64, 2);
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = m.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.final_logits.data(), b.final_logits.data());
    for (p, q) in a.aux_logits.iter().zip(&b.aux_logits) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn construction_is_seeded() {
    let a = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let b = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let c = CmUnet::<f32>::new(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
    let flat = |m: &CmUnet<f32>| m.store.params().iter().flat_map(|p| p.tensor().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn every_parameter_is_reachable() {
    let m = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let out = m.forward(&input(2, 64, 3), Mode::Train).unwrap();
    let mut loss = out.final_logits.sum();
    for a in &out.aux_logits {
        loss = loss.add(&a.sum()).unwrap();
    }
    loss.backward().unwrap();
    for p in m.store.params() {
        assert!(p.grad().is_some(), "{} unreachable", p.name());
    }
}

#[test]
fn ablation_flags_keep_shapes() {
    let full = CmUnet::<f32>::new(ModelConfig::default()).unwrap();
    let x = input(1, 64, 4);
    for (msaa, multi) in [(false, true), (true, false), (false, false)] {
        let m = CmUnet::<f32>::new(ModelConfig { use_msaa: msaa, multi_output: multi, ..ModelConfig::default() }).unwrap();
        let out = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.final_logits.shape(), &[1, 4, 64, 64]);
        assert_eq!(out.aux_logits.len(), if multi { 3 } else { 0 });
        if !msaa {
            assert!(m.count_parameters() < full.count_parameters());
            for (stage, f) in m.decoder.iter().zip(&full.decoder) {
                let feats = m.encoder.forward(&x, Mode::Eval).unwrap();
                assert_eq!(stage.skip(&feats).unwrap().shape(), f.skip(&full.encoder.forward(&x, Mode::Eval).unwrap()).unwrap().shape());
            }
        }
    }
}

#[test]
fn single_output_loss_is_principal_term() {
    let m = CmUnet::<f32>::new(ModelConfig { multi_output: false, ..ModelConfig::default() }).unwrap();
    let out = m.forward(&input(2, 64, 5), Mode::Train).unwrap();
    let target: Vec<u8> = (0..2 * 64 * 64).map(|i| (i % 4) as u8).collect();
    let l = total_loss(&out, &target, 0.4).unwrap().item().unwrap();
    let p = segmentation_loss(&out.final_logits, &target).unwrap().item().unwrap();
    assert_eq!(l.to_bits(), p.to_bits());
}

#[test]
fn decoder_stage_with_empty_skip_and_dead_blocks() {
    let m = CmUnet::<f64>::new(ModelConfig::default()).unwrap();
    let stage = &m.decoder[0];
    for b in &stage.blocks {
        b.out_proj.weight.set_data(vec![0.0; b.out_proj.weight.numel()]).unwrap();
        let bias = b.out_proj.bias.as_ref().unwrap();
        bias.set_data(vec![0.0; bias.numel()]).unwrap();
    }
    let deep = Tensor::randn(&[1, 128, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let skip = Tensor::zeros(&[1, 48, 4, 4]);
    let y = stage.forward(&deep, &skip).unwrap();
    assert_eq!(y.shape(), &[1, 48, 4, 4]);
    let want = stage.deep_proj.forward(&deep.resize(4, 4, cmunet_tensor::ResizeMode::Bilinear).unwrap()).unwrap();
    assert_eq!(y.data(), want.data());
    assert!(stage.forward(&deep, &Tensor::zeros(&[1, 48, 6, 6])).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { num_classes: 1, ..ModelConfig::default() },
        ModelConfig { encoder_channels: vec![16, 32, 64], ..ModelConfig::default() },
        ModelConfig { included_classes: vec![0, 7], ..ModelConfig::default() },
        ModelConfig { encoder_channels: vec![10, 32, 64, 128], ..ModelConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(CmUnet::<f32>::new(cfg), Err(cmunet::Error::Config(_))));
    }
}
