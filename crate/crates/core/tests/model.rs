use nrkd_core::model::{build_model, ModelConfig};
use nrkd_core::raster::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_parameter_count() {
    // 3x3 conv without bias + batch norm (gamma, beta) per layer.
    let cb = |cin: usize, cout: usize| 9 * cin * cout + 2 * cout;
    let encoder = cb(1, 32) + cb(32, 32) + cb(32, 64) + cb(64, 64) + cb(64, 128) + cb(128, 128);
    let bottleneck = 2 * cb(128, 128);
    let decoder = cb(128, 64) + cb(64 + 128, 64) + cb(64, 64)
        + cb(64, 32) + cb(32 + 64, 32) + cb(32, 32)
        + cb(32, 32) + cb(32 + 32, 32) + cb(32, 32);
    let head = 32 + 1;
    let closed_form = encoder + bottleneck + decoder + head;
    assert_eq!(closed_form, 896_449);
    let m = build_model(&ModelConfig::default(), 0).unwrap();
    assert_eq!(m.parameter_count(), closed_form);
}

#[test]
fn training_resolution_round_trips_shape() {
    let cfg = ModelConfig {
        encoder_dims: vec![1, 4, 8, 8],
        decoder_dims: vec![8, 4, 4, 1],
        ..Default::default()
    };
    let m = build_model(&cfg, 0).unwrap();
    let s = m.forward(&Raster::filled(400, 300, 0.5)).unwrap();
    assert_eq!(s.shape(), (400, 300));
}

/// Shifts by multiples of 8 commute with the network away from the borders.
#[test]
fn translation_equivariance_for_aligned_shifts() {
    let m = build_model(&ModelConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let big = nrkd_core::scene::render_scene(200, 136, &mut rng);
    let noise: Vec<f32> = (0..200 * 136).map(|_| rng.random_range(-0.05..0.05)).collect();
    let big = Raster::from_fn(200, 136, |x, y| (big.get(x, y) + noise[y * 200 + x]).clamp(0.0, 1.0));
    let (dx, dy) = (8usize, 8usize);
    let a = Raster::from_fn(192, 128, |x, y| big.get(x, y));
    let b = Raster::from_fn(192, 128, |x, y| big.get(x + dx, y + dy));
    let sa = m.forward(&a).unwrap();
    let sb = m.forward(&b).unwrap();
    let margin = 60;
    let mut worst = 0.0f32;
    for y in margin..128 - margin {
        for x in margin..192 - margin - dx {
            worst = worst.max((sa.get(x + dx, y + dy) - sb.get(x, y)).abs());
        }
    }
    assert!(worst < 1e-4, "max deviation {worst}");
}
