use super::*;
use crate::model::{Gaussian3D, SemanticGaussian};
use crate::quat::Quat;

fn cam() -> Camera {
    Camera::identity([40.0, 40.0, 16.0, 16.0], 32, 32)
}

fn splat(mu: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Gaussian3D {
    Gaussian3D::with_color(
        Vec3::from(mu),
        Vec3::new(scale, scale, scale),
        Quat::IDENTITY,
        opacity,
        color,
    )
}

fn center(img: &Image) -> [f64; 3] {
    img.pixel(16, 16)
}

#[test]
fn empty_scene_renders_background() {
    let out = render(&Scene::empty(4), &cam(), &RenderOptions::default()).unwrap();
    assert!(out.color.data.iter().all(|&c| c == 0.0));
    assert!(out.alpha.data.iter().all(|&a| a == 0.0));
}

#[test]
fn opaque_gaussian_saturates_center() {
    let scene = Scene::new(vec![splat([0.0, 0.0, 3.0], 1.0, 1.0, [1.0, 0.0, 0.0])], 0, 4);
    let out = render(&scene, &cam(), &RenderOptions::default()).unwrap();
    let c = center(&out.color);
    assert!((c[0] - 1.0).abs() < 1e-3 && c[1].abs() < 1e-3 && c[2].abs() < 1e-3);
    assert!(out.alpha.get(16, 16) >= 0.99);
    assert!((out.depth.get(16, 16) - 3.0).abs() < 1e-12);
}

#[test]
fn front_to_back_compositing() {
    let scene = Scene::new(
        vec![
            splat([0.0, 0.0, 4.0], 1.0, 1.0, [0.0, 0.0, 1.0]),
            splat([0.0, 0.0, 2.0], 1.0, 0.5, [1.0, 0.0, 0.0]),
        ],
        0,
        4,
    );
    let out = render(&scene, &cam(), &RenderOptions::default()).unwrap();
    let c = center(&out.color);
    assert!((c[0] - 0.5).abs() < 1e-9 && c[1].abs() < 1e-9 && (c[2] - 0.5).abs() < 1e-9);
    // expected depth is the weight-normalized mean of 2 and 4
    assert!((out.depth.get(16, 16) - 3.0).abs() < 1e-9);
}

fn random_scene(seed: u64, n: usize) -> Scene {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let geo = (0..n)
        .map(|_| {
            let mut g = splat(
                [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(2.5..4.0)],
                rng.gen_range(0.1..0.4),
                rng.gen_range(0.2..0.95),
                [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            );
            g.scale.x *= rng.gen_range(0.5..1.5);
            g.rot = Quat::new(1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))
                .canonical()
                .unwrap();
            g.feat = Some((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            g
        })
        .collect();
    Scene::new(geo, 0, 4)
}

#[test]
fn weights_sum_to_alpha_and_stay_in_range() {
    let scene = random_scene(3, 10);
    let out = render(&scene, &cam(), &RenderOptions::with_features()).unwrap();
    for &a in &out.alpha.data {
        assert!((0.0..=1.0).contains(&a));
    }
    for &c in &out.color.data {
        assert!((0.0..=1.0).contains(&c));
    }
}

#[test]
fn output_is_independent_of_input_order() {
    let scene = random_scene(5, 10);
    let mut rev = scene.clone();
    rev.geo.reverse();
    let a = render(&scene, &cam(), &RenderOptions::with_features()).unwrap();
    let b = render(&rev, &cam(), &RenderOptions::with_features()).unwrap();
    assert_eq!(a.color, b.color);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.feature, b.feature);
}

#[test]
fn zero_opacity_yields_background_exactly() {
    let mut scene = random_scene(9, 10);
    scene.geo.iter_mut().for_each(|g| g.opacity = 0.0);
    let bg = [0.2, 0.4, 0.6];
    let out = render(
        &scene,
        &cam(),
        &RenderOptions {
            background: bg,
            features: false,
        },
    )
    .unwrap();
    for px in out.color.data.chunks(3) {
        assert_eq!(px, &bg);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let scene = random_scene(11, 6);
    let n = 32 * 32;
    let pg = PixelGrad {
        color: Some(vec![0.0; n * 3]),
        depth: Some(vec![0.0; n]),
        alpha: None,
        feature: None,
    };
    let (_, g) = render_with_grad(&scene, &cam(), &RenderOptions::default(), &pg).unwrap();
    assert_eq!(g, RenderGrad::zeros(&scene));
}

#[test]
fn culled_gaussian_has_zero_gradient() {
    let mut scene = random_scene(13, 4);
    scene.geo.push(splat([50.0, 0.0, 3.0], 0.2, 0.9, [0.5; 3]));
    scene.geo.push(splat([0.0, 0.0, -3.0], 0.2, 0.9, [0.5; 3]));
    let n = 32 * 32;
    let pg = PixelGrad {
        color: Some(vec![1.0; n * 3]),
        depth: Some(vec![1.0; n]),
        alpha: Some(vec![1.0; n]),
        feature: None,
    };
    let (_, g) = render_with_grad(&scene, &cam(), &RenderOptions::default(), &pg).unwrap();
    let zero = RenderGrad::zeros(&scene);
    assert_eq!(g.geo[4], zero.geo[4]);
    assert_eq!(g.geo[5], zero.geo[5]);
    assert_ne!(g.geo[0], zero.geo[0]);
}

#[test]
fn red_dc_gradient_matches_finite_difference() {
    // loss = red channel of the center pixel
    let scene = Scene::new(vec![splat([0.05, -0.02, 3.0], 0.3, 0.7, [0.4, 0.5, 0.6])], 0, 4);
    let n = 32 * 32;
    let mut color = vec![0.0; n * 3];
    color[(16 * 32 + 16) * 3] = 1.0;
    let pg = PixelGrad {
        color: Some(color),
        ..Default::default()
    };
    let opts = RenderOptions::default();
    let (_, g) = render_with_grad(&scene, &cam(), &opts, &pg).unwrap();
    let analytic = g.geo[0].sh[0][0];
    assert!(analytic > 0.0);
    let h = 1e-4;
    let eval = |d: f64| {
        let mut s = scene.clone();
        s.geo[0].sh[0][0] += d;
        render(&s, &cam(), &opts).unwrap().color.pixel(16, 16)[0]
    };
    let fd = (eval(h) - eval(-h)) / (2.0 * h);
    assert!((analytic - fd).abs() / (fd.abs() + 1e-6) < 1e-3);
}

#[test]
fn semantic_layer_renders_features() {
    let mut scene = Scene::new(vec![splat([0.0, 0.0, 3.0], 0.3, 0.9, [0.5; 3])], 0, 2);
    scene.sem = Some(vec![SemanticGaussian {
        mu: Vec3::new(0.0, 0.0, 3.0),
        scale_iso: 1.0,
        opacity: 1.0,
        feat: vec![0.0, 2.0],
    }]);
    let out = render(&scene, &cam(), &RenderOptions::with_features()).unwrap();
    let f = out.feature.unwrap();
    assert_eq!(f.at(16 * 32 + 16), &[0.0, 2.0]);
}

#[test]
fn features_require_a_source() {
    let scene = Scene::new(vec![splat([0.0, 0.0, 3.0], 0.3, 0.9, [0.5; 3])], 0, 2);
    assert!(render(&scene, &cam(), &RenderOptions::with_features()).is_err());
}
