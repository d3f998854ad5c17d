use cvdensity::camera::{PanoramaCamera, SatelliteCamera, WorldFrame};
use cvdensity::optimize::{evaluate_fit, fit_density, FitConfig};
use cvdensity::synth::SceneSpec;
use cvdensity::volume::Resolution;
use cvdensity::workflow::SceneSetup;

#[test]
fn ground_plane_scene_recovers_heldout_depth() {
    // Every below-horizon pixel of a 16-row panorama lands within 21 m of
    // the camera, so the whole visible ground lies inside the footprint.
    let frame = WorldFrame::new(51.2, 51.2, 4.0).unwrap();
    let spec = SceneSpec::from_json(
        r#"{ "name": "flat",
             "frame": { "extent_e": 51.2, "extent_n": 51.2, "max_height": 4.0 },
             "ground": { "type": "checker", "size_m": 3.2, "c1": [0.8, 0.8, 0.7], "c2": [0.3, 0.3, 0.35] },
             "sky_color": [0.5, 0.7, 0.9] }"#,
    )
    .unwrap();
    let setup = SceneSetup::new(spec, SatelliteCamera::covering(&frame, 64, 64)).unwrap();
    let cfg = FitConfig {
        steps: 2000,
        samples_per_ray: 100,
        resolution: Resolution::new(8, 8, 257),
        seed: 2,
        ..FitConfig::default()
    };
    let truth = setup.ground_truth(cfg.resolution).unwrap();
    let cam = |e, n| PanoramaCamera::at_ground(e, n, 16, 64);
    let train: Vec<_> = [(-3.0, 0.0), (3.0, 1.0), (0.0, -3.0)]
        .into_iter()
        .map(|(e, n)| setup.training_view(&truth, cam(e, n), cfg.samples_per_ray).unwrap())
        .collect();
    let heldout = vec![setup.heldout_view(&truth, cam(1.0, -1.0), cfg.samples_per_ray).unwrap()];
    let fit = fit_density(&setup.satellite, &frame, &train, &cfg).unwrap();
    let (report, _) = evaluate_fit(&fit.volume, &setup.satellite, &heldout, cfg.samples_per_ray).unwrap();
    let rmse = report.aggregate.depth_rmse_m.unwrap();
    assert!(rmse <= 0.05 * 2.0, "held-out depth RMSE {rmse}");
}
