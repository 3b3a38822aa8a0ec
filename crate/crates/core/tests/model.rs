use cyclegan_ad::model::{
    build_discriminator, build_generator, Checkpoint, DiscriminatorSpec, GeneratorSpec, UpsampleMode,
};
use cyclegan_ad::tensor::{Shape, Tensor};

fn small_spec(resolution: usize) -> GeneratorSpec {
    GeneratorSpec {
        resolution,
        in_channels: 3,
        out_channels: 3,
        base_width: 4,
        n_residual_blocks: 1,
        upsample: UpsampleMode::Transpose,
    }
}

fn wave(n: usize, c: usize, h: usize, w: usize, phase: f32) -> Tensor<f32> {
    let s = Shape::new(n, c, h, w);
    Tensor::from_vec(s, (0..s.numel()).map(|i| (i as f32 * 0.173 + phase).sin() * 0.8).collect()).unwrap()
}

#[test]
fn outputs_do_not_depend_on_batch_composition() {
    let g = build_generator::<f32>(&small_spec(16), 5).unwrap();
    let batch = wave(4, 3, 16, 16, 0.3);
    let together = g.forward_tensor(&batch).unwrap();
    for i in 0..4 {
        let alone = g.forward_tensor(&batch.select(i)).unwrap();
        let diff = alone.data().iter().zip(together.sample(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "sample {i} differs by {diff}");
    }
    let d = build_discriminator::<f32>(&DiscriminatorSpec { in_channels: 3, widths: vec![4, 8] }, 5).unwrap();
    let together = d.forward_tensor(&batch).unwrap();
    for i in 0..4 {
        let alone = d.forward_tensor(&batch.select(i)).unwrap();
        assert!(alone.max_abs_diff(&together.select(i)) <= 1e-5);
    }
}

#[test]
fn output_depends_on_input_and_stays_in_range() {
    let g = build_generator::<f32>(&small_spec(16), 1).unwrap();
    let a = g.forward_tensor(&wave(1, 3, 16, 16, 0.0)).unwrap();
    let b = g.forward_tensor(&wave(1, 3, 16, 16, 1.0)).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-4);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn output_shape_matches_input_for_every_multiple_of_four() {
    for res in [8, 12, 20, 28] {
        for upsample in [UpsampleMode::Transpose, UpsampleMode::ResizeConv] {
            let spec = GeneratorSpec { upsample, ..small_spec(res) };
            let g = build_generator::<f32>(&spec, 0).unwrap();
            let x = wave(2, 3, res, res, 0.5);
            assert_eq!(g.forward_tensor(&x).unwrap().shape(), x.shape(), "{res} {upsample:?}");
        }
    }
    let g = build_generator::<f32>(&small_spec(16), 0).unwrap();
    assert!(g.forward_tensor(&wave(1, 3, 12, 12, 0.0)).is_err());
}

#[test]
fn patch_map_is_at_least_two_by_two_from_128() {
    let d = DiscriminatorSpec::patchgan_70(3);
    for size in (128..=512).step_by(4) {
        let out = d.output_size(size).unwrap();
        assert!(out >= 2, "{size} gives {out}");
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let g = build_generator::<f32>(&small_spec(8), 9).unwrap();
    let mut ckpt = Checkpoint::new(serde_json::json!({ "kind": "test" }));
    ckpt.push_params("G", &g.params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    ckpt.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap().params("G").unwrap();
    assert_eq!(back.names(), g.params.names());
    for (a, b) in back.tensors().iter().zip(g.params.tensors()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}
