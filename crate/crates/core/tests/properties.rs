use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use strf_core::field::{materialize, sample_cp, sample_vm, Decomposition, TensorLevel};
use strf_core::metrics::{psnr, ssim};
use strf_core::render::{alphas, composite_analytic, transmittance};
use strf_core::{Config, PinholeCamera, Ray, RgbImage, SceneBounds, Vec3};

fn image(w: usize, h: usize, data: Vec<f64>) -> RgbImage {
    let mut img = RgbImage::new(w, h);
    img.data.copy_from_slice(&data[..w * h * 3]);
    img
}

fn image_pair() -> impl Strategy<Value = (RgbImage, RgbImage)> {
    (11usize..18, 11usize..18).prop_flat_map(|(w, h)| {
        let n = w * h * 3;
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(0.0f64..1.0, n),
        )
            .prop_map(move |(a, b)| (image(w, h, a), image(w, h, b)))
    })
}

fn permute(img: &RgbImage, perm: [usize; 3]) -> RgbImage {
    let mut out = img.clone();
    for (o, i) in out.data.chunks_exact_mut(3).zip(img.data.chunks_exact(3)) {
        for k in 0..3 {
            o[k] = i[perm[k]];
        }
    }
    out
}

proptest! {
    #[test]
    fn transmittance_is_a_survival_curve(sigma in prop::collection::vec(0.0f64..50.0, 1..40),
                                         delta in 0.001f64..0.2) {
        let a = alphas(&sigma, &vec![delta; sigma.len()]).unwrap();
        let tr = transmittance(&a);
        prop_assert_eq!(tr[0], 1.0);
        for w in tr.windows(2) {
            prop_assert!(w[1] <= w[0] && w[1] >= 0.0);
        }
        // Weights telescope to one minus the final survival.
        let wsum: f64 = a.iter().zip(&tr).map(|(a, t)| a * t).sum();
        let tau: f64 = sigma.iter().map(|s| s * delta).sum();
        prop_assert!((wsum - (1.0 - (-tau).exp())).abs() < 1e-9);
    }

    #[test]
    fn constant_medium_composites_in_closed_form(k in 0.0f64..8.0, len in 0.1f64..3.0,
                                                 c in prop::array::uniform3(0.0f64..1.0), n in 1usize..64) {
        let r = composite_analytic(|_| k, |_| c, 0.0, len, n).unwrap();
        let opacity = 1.0 - (-k * len).exp();
        for ch in 0..3 {
            prop_assert!((r.rgb[ch] - c[ch] * opacity).abs() < 1e-9);
        }
        prop_assert!((r.opacity - opacity).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric((a, b) in image_pair()) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn metrics_ignore_channel_order((a, b) in image_pair(), p in Just([2usize, 0, 1])) {
        let (pa, pb) = (permute(&a, p), permute(&b, p));
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&pa, &pb).unwrap()).abs() < 1e-9);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&pa, &pb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ppm_round_trip_of_8bit_images(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h * 3).map(|_| rand::Rng::gen_range(&mut rng, 0u8..=255) as f64 / 255.0).collect();
        let img = image(w, h, data);
        let bytes = img.to_ppm();
        let back = RgbImage::from_ppm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(back.to_ppm(), bytes);
    }

    #[test]
    fn config_text_round_trip(levels in 1usize..10, rank in 1usize..9, samples in 1usize..300,
                              lr in 1e-6f64..1e-1, cp in any::<bool>(), seed in any::<u64>(),
                              app in 0usize..3, reg in 0usize..3) {
        let text = format!(
            "seed = {seed}\nfield.L = {levels}\nfield.R = {rank}\nrender.samples = {samples}\noptim.lr_tensor = {lr:?}\n\
             field.decomposition = {}\nlight.appearance = {}\nloss.regularizer = {}\n",
            if cp { "cp" } else { "vm" },
            ["asg", "sh", "lambertian"][app],
            ["tv", "l1", "none"][reg],
        );
        let cfg = Config::from_text(&text).unwrap();
        prop_assert_eq!(cfg.field.levels, levels);
        prop_assert_eq!(cfg.optim.lr_tensor, lr);
        let again = Config::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn factorized_levels_match_dense_nodes(seed in any::<u64>(), cp in any::<bool>(),
                                           res in prop::array::uniform3(2usize..7),
                                           rank in 1usize..4, channels in 1usize..3) {
        let kind = if cp { Decomposition::Cp } else { Decomposition::Vm };
        let level = TensorLevel::<f64>::random(kind, res, rank, channels, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let dense = materialize(&level);
        for i in 0..res[0] {
            for j in 0..res[1] {
                for k in 0..res[2] {
                    let p = [i, j, k].map(|x| x as f64);
                    let p = [p[0] / (res[0] - 1) as f64, p[1] / (res[1] - 1) as f64, p[2] / (res[2] - 1) as f64];
                    for c in 0..channels {
                        let s = if cp { sample_cp(&level, &p, c) } else { sample_vm(&level, &p, c) };
                        prop_assert!((s - dense[((i * res[1] + j) * res[2] + k) * channels + c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn box_entry_and_exit_lie_on_the_surface(o in prop::array::uniform3(-20.0f64..20.0),
                                             d in prop::array::uniform3(-1.0f64..1.0)) {
        let b = SceneBounds::new(Vec3::zeros(), Vec3::new(4.0, 3.0, 2.0)).unwrap();
        let dir = Vec3::new(d[0], d[1], d[2]);
        prop_assume!(dir.norm() > 0.1);
        let r = Ray::new(Vec3::new(o[0], o[1], o[2]), dir, (0, 0)).unwrap();
        if let Some((t0, t1)) = b.intersect(&r) {
            prop_assert!(t0 <= t1 && t0 >= 0.0);
            for t in [t0, t1] {
                let p = r.at(t);
                let (q, _) = b.normalize_point(&p);
                let on_face = (0..3).any(|a| q[a].abs() < 1e-9 || (q[a] - 1.0).abs() < 1e-9);
                prop_assert!(on_face || (t == 0.0 && b.contains(&p)));
                prop_assert!((b.denormalize_point(&q) - p).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn pinhole_rays_project_to_their_pixels(row in 0usize..48, col in 0usize..64, t in 1.0f64..50.0) {
        let cam = PinholeCamera::look_at(
            Vec3::new(10.0, -20.0, 60.0), Vec3::new(32.0, 32.0, 0.0), Vec3::new(0.0, 0.0, 1.0), 80.0, 48, 64,
        ).unwrap();
        let r = cam.pixel_ray(row, col);
        let (pr, pc) = cam.project(&r.at(t)).unwrap();
        prop_assert!((pr - (row as f64 + 0.5)).abs() < 1e-8);
        prop_assert!((pc - (col as f64 + 0.5)).abs() < 1e-8);
    }
}
