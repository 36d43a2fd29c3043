use derf::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use derf::data::{synthesize_dataset, Dataset};
use derf::field::ArchitectureDescriptor;
use derf::geometry::Vec3;
use derf::render::{head_contribution, render_image, DensitySource, RenderSettings};
use derf::scene::SceneDescription;
use derf::train::{train_run, Phase, TrainConfig, TrainData, TrainState};
use derf::voronoi::Aabb;
use derf::EvalMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(seed: u64) -> Dataset {
    synthesize_dataset(&SceneDescription::three_blob(), 10, 12, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small_config(n_heads: usize, pre: u64, main: u64) -> TrainConfig {
    TrainConfig {
        batch_rays: 32,
        n_samples: 16,
        iters_pretrain: pre,
        iters_main: main,
        n_heads,
        descriptor: ArchitectureDescriptor::new(3, 16),
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn fixed_seed_is_bit_reproducible() {
    let ds = small_dataset(1);
    let a = train_run(small_config(3, 15, 15), &ds, None).unwrap();
    let b = train_run(small_config(3, 15, 15), &ds, None).unwrap();
    assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
    let c = train_run(TrainConfig { seed: 5, ..small_config(3, 15, 15) }, &ds, None).unwrap();
    assert_ne!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&c).unwrap());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let ds = small_dataset(2);
    let data = TrainData::from_dataset(&ds).unwrap();
    let full = train_run(small_config(2, 6, 6), &ds, None).unwrap();

    let mut state = TrainState::for_dataset(small_config(2, 6, 6), &ds).unwrap();
    for _ in 0..4 {
        state.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    while !resumed.is_done() {
        resumed.step(&data).unwrap();
    }
    assert_eq!(checkpoint_bytes(&resumed).unwrap(), checkpoint_bytes(&full).unwrap());
}

#[test]
fn zero_main_iterations_still_renders() {
    let ds = small_dataset(3);
    let state = train_run(small_config(4, 5, 0), &ds, None).unwrap();
    assert_eq!(state.phase, Phase::Main);
    assert!(state.model.heads.iter().all(|h| *h == state.model.coarse));
    let f = &ds.frames[0];
    let img = render_image(
        &state.model,
        &f.camera,
        &RenderSettings {
            n_samples: 8,
            seed: 0,
            background: ds.background,
        },
        EvalMode::Hard,
    );
    assert!(img.pixels.iter().all(|p| p.iter().all(|v| v.is_finite())));
}

#[test]
fn inconsistent_inputs_rejected_before_training() {
    let mut ds = small_dataset(4);
    ds.frames.truncate(1);
    // The only frame is held out.
    assert!(train_run(small_config(2, 1, 1), &ds, None).is_err());
    let ds = small_dataset(4);
    assert!(train_run(TrainConfig { n_samples: 0, ..small_config(2, 1, 1) }, &ds, None).is_err());
}

#[test]
fn transparent_coarse_field_leaves_sites_alone() {
    let ds = small_dataset(5);
    let data = TrainData::from_dataset(&ds).unwrap();
    let mut state = TrainState::for_dataset(small_config(4, 10, 0), &ds).unwrap();
    state.model.coarse.density.bias[0] = -1e4;
    let sites = state.model.decomposition.sites().to_vec();
    for _ in 0..3 {
        let m = state.phase1_step(&data).unwrap();
        state.iter += 1;
        assert_eq!(m.l_uniform, Some(0.0));
    }
    assert_eq!(state.model.decomposition.sites(), &sites[..]);
}

#[test]
fn uniformity_never_reaches_the_coarse_network() {
    let ds = small_dataset(6);
    let data = TrainData::from_dataset(&ds).unwrap();
    let base = TrainState::for_dataset(small_config(3, 10, 0), &ds).unwrap();
    let mut moved = base.clone();
    let shifted: Vec<Vec3> = base
        .model
        .decomposition
        .sites()
        .iter()
        .map(|s| s * 0.5 + Vec3::new(0.1, -0.2, 0.05))
        .collect();
    moved.model.decomposition.set_sites(shifted).unwrap();
    let mut base = base;
    for _ in 0..3 {
        let a = base.phase1_step(&data).unwrap();
        let b = moved.phase1_step(&data).unwrap();
        base.iter += 1;
        moved.iter += 1;
        assert_eq!(a.l_radiance, b.l_radiance);
        assert_ne!(a.l_uniform, b.l_uniform);
    }
    assert_eq!(base.model.coarse, moved.model.coarse);
    assert_ne!(base.model.decomposition.sites(), moved.model.decomposition.sites());
}

#[test]
fn single_head_main_phase_is_plain_training() {
    // With one head every sample routes to it, whatever the site.
    let ds = small_dataset(7);
    let data = TrainData::from_dataset(&ds).unwrap();
    let bounds = ds.content_bounds().unwrap();
    let mut a = TrainState::new(small_config(1, 0, 5), &bounds).unwrap();
    let mut b = a.clone();
    b.model.decomposition.set_sites(vec![Vec3::new(5.0, 5.0, 5.0)]).unwrap();
    for _ in 0..5 {
        a.step(&data).unwrap();
        b.step(&data).unwrap();
    }
    assert_eq!(a.model.heads, b.model.heads);
}

#[test]
fn contributions_are_conserved_under_site_motion() {
    let ds = small_dataset(8);
    let mut state = train_run(small_config(4, 20, 0), &ds, None).unwrap();
    state.model.decomposition.set_beta(3.0).unwrap();
    let ray = ds.frames[1].camera.pixel_ray(6, 6);
    let before = head_contribution(&state.model, &ray, 64, &mut ChaCha8Rng::seed_from_u64(1), DensitySource::Coarse).unwrap();
    let sites: Vec<Vec3> = state
        .model
        .decomposition
        .sites()
        .iter()
        .map(|s| s + Vec3::new(0.3, -0.1, 0.2))
        .collect();
    state.model.decomposition.set_sites(sites).unwrap();
    let after = head_contribution(&state.model, &ray, 64, &mut ChaCha8Rng::seed_from_u64(1), DensitySource::Coarse).unwrap();
    assert!((before.iter().sum::<f64>() - after.iter().sum::<f64>()).abs() <= 1e-9);
    assert!(before.iter().zip(&after).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn main_phase_loss_decreases_over_windows() {
    let ds = synthesize_dataset(&SceneDescription::three_blob(), 16, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let config = TrainConfig {
        batch_rays: 256,
        n_samples: 24,
        iters_pretrain: 0,
        iters_main: 2000,
        n_heads: 2,
        descriptor: ArchitectureDescriptor::new(3, 16),
        seed: 1,
        ..TrainConfig::default()
    };
    let data = TrainData::from_dataset(&ds).unwrap();
    let mut state = TrainState::new(config, &ds.content_bounds().unwrap()).unwrap();
    let mut losses = Vec::new();
    while !state.is_done() {
        losses.push(state.step(&data).unwrap().l_radiance);
    }
    let windows: Vec<f64> = losses.chunks(100).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let regressions = windows.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(regressions <= 1, "window means {windows:?}");
}

#[test]
fn grid_layout_places_a_regular_lattice() {
    let bounds = Aabb::new(Vec3::from_element(-1.0), Vec3::from_element(1.0));
    let config = TrainConfig {
        sites: derf::train::SiteLayout::Grid,
        ..small_config(8, 1, 1)
    };
    let state = TrainState::new(config, &bounds).unwrap();
    for s in state.model.decomposition.sites() {
        assert!(s.iter().all(|c| (c.abs() - 0.5).abs() < 1e-12));
    }
}
