use proptest::prelude::*;

use diffkit::cli::{Checkpoint, RunConfig};
use diffkit::cli::checkpoint::StoredTensor;
use diffkit::data::epoch_permutation;
use diffkit::latent::{kl_divergence, LatentCodec, Vae, VaeConfig};
use diffkit::metrics::{fid, fit_gaussian, inception_score, matrix_sqrt_psd, SquareMatrix};
use diffkit::sampler::{ddim_pred_x0, ddim_variance, select_timesteps};
use diffkit::schedule::{BetaSchedule, ScheduleConfig, ScheduleTable};
use diffkit::{Rng, Tensor};

fn schedule_strategy() -> impl Strategy<Value = ScheduleConfig> {
    (1e-5f64..0.01, 0.0f64..0.05, 2usize..400, any::<bool>()).prop_map(|(start, extra, t, cosine)| ScheduleConfig {
        beta_start: start,
        beta_end: (start + extra).min(0.5),
        num_train_timesteps: t,
        beta_schedule: if cosine { BetaSchedule::Cosine } else { BetaSchedule::Linear },
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_decreases_and_matches_product(cfg in schedule_strategy()) {
        let tab = ScheduleTable::build(&cfg).unwrap();
        let mut prod = 1.0;
        for t in 0..cfg.num_train_timesteps {
            prod *= 1.0 - tab.betas[t];
            prop_assert!(((tab.alphas_cumprod[t] - prod) / prod).abs() < 1e-6);
            if t > 0 {
                prop_assert!(tab.alphas_cumprod[t] < tab.alphas_cumprod[t - 1]);
            }
        }
    }

    #[test]
    fn pred_x0_inverts_add_noise(seed in any::<u64>(), t in 0usize..1000) {
        let tab = ScheduleTable::build(&ScheduleConfig::default()).unwrap();
        let mut rng = Rng::new(seed);
        let x0 = Tensor::<f64>::random_uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let eps = Tensor::<f64>::random_normal(&[1, 2, 3, 3], &mut rng);
        let xt = tab.add_noise(&x0, &eps, &[t]).unwrap();
        let back = ddim_pred_x0(&tab, &eps, t, &xt).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ddim_sigma_is_zero_at_eta_zero_and_finite_otherwise(t in 1usize..1000, stride in 1usize..50, eta in 0.0f64..1.0) {
        let tab = ScheduleTable::build(&ScheduleConfig::default()).unwrap();
        let prev = t as i64 - stride.min(t) as i64;
        prop_assert_eq!(ddim_variance(&tab, t, prev, 0.0), 0.0);
        let v = ddim_variance(&tab, t, prev, eta);
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn selected_timesteps_descend_within_range(t in 2usize..2000, frac in 0.0f64..1.0) {
        let s = ((t as f64 * frac) as usize).clamp(1, t);
        let steps = select_timesteps(t, s).unwrap();
        prop_assert_eq!(steps.len(), s);
        prop_assert!(steps.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(steps[0] < t);
    }

    #[test]
    fn fid_is_zero_on_self_and_symmetric(seed in any::<u64>(), n in 5usize..40, d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n * d).map(|_| 2.0 * rng.normal() + 0.5).collect();
        let (sa, sb) = (fit_gaussian(&a, n, d).unwrap(), fit_gaussian(&b, n, d).unwrap());
        prop_assert!(fid(&sa, &sa).unwrap().abs() < 1e-6);
        let (ab, ba) = (fid(&sa, &sb).unwrap(), fid(&sb, &sa).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn inception_score_is_between_one_and_class_count(seed in any::<u64>(), n in 1usize..50, c in 1usize..12) {
        let mut rng = Rng::new(seed);
        let mut probs = Vec::with_capacity(n * c);
        for _ in 0..n {
            let row: Vec<f64> = (0..c).map(|_| rng.uniform().powi(4)).collect();
            let s: f64 = row.iter().sum::<f64>().max(1e-300);
            probs.extend(row.iter().map(|v| v / s));
        }
        let (m, sd) = inception_score(&probs, n, c, 1).unwrap();
        prop_assert!(m >= 1.0 - 1e-9 && m <= c as f64 + 1e-9, "{}", m);
        prop_assert!(sd >= 0.0);
    }

    #[test]
    fn sqrt_of_square_recovers_psd_matrix(seed in any::<u64>(), d in 1usize..12) {
        let mut rng = Rng::new(seed);
        // M = Q diag(λ) Qᵀ with well-separated positive eigenvalues.
        let g = SquareMatrix::new(d, (0..d * d).map(|_| rng.normal()).collect()).unwrap();
        let q = diffkit::metrics::symmetric_eigen(&g.matmul(&g.transpose()).unwrap().symmetrized()).unwrap().vectors;
        let lambdas: Vec<f64> = (0..d).map(|i| 0.5 + i as f64 + rng.uniform() * 0.5).collect();
        let m = q.matmul(&SquareMatrix::diag(&lambdas)).unwrap().matmul(&q.transpose()).unwrap();
        let root = matrix_sqrt_psd(&m.matmul(&m).unwrap().symmetrized()).unwrap();
        prop_assert!(root.sub(&m).frobenius() <= 1e-5 * m.frobenius());
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), spread in 0.1f64..6.0) {
        let mut rng = Rng::new(seed);
        let mu = Tensor::<f64>::random_normal(&[2, 3, 2, 2], &mut rng).mul_scalar(spread);
        let logvar = Tensor::<f64>::random_normal(&[2, 3, 2, 2], &mut rng).mul_scalar(spread);
        prop_assert!(kl_divergence(&mu, &logvar).unwrap().item().unwrap() >= -1e-7);
    }

    #[test]
    fn permutations_cover_every_index(n in 1usize..500, seed in any::<u64>(), epoch in 0usize..100) {
        let mut p = epoch_permutation(n, seed, epoch, true);
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        step in any::<u64>(),
        scale in proptest::option::of(any::<f64>()),
        tensors in proptest::collection::btree_map("[a-z.]{1,12}", proptest::collection::vec(any::<f32>(), 0..20), 0..6),
        text in ".{0,64}",
    ) {
        let tensors = tensors.into_iter().map(|(k, v)| (k, StoredTensor { shape: vec![v.len()], data: v })).collect();
        let ck = Checkpoint { config_text: text, global_step: step, latent_scale: scale, tensors };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn vae_round_trip_keeps_shape(levels in 0usize..3, mult in 1usize..4, batch in 1usize..3) {
        let factor = 1 << levels;
        let cfg = VaeConfig { in_ch: 3, ch: 4, latent_channels: 2, factor };
        let vae = Vae::<f32>::new(cfg, &mut Rng::new(0)).unwrap();
        let side = factor * mult;
        let x = Tensor::<f32>::zeros(&[batch, 3, side, side]);
        let z = vae.encode(&x).unwrap();
        prop_assert_eq!(z.shape(), &[batch, 2, mult, mult][..]);
        let y = vae.decode(&z).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }
}

/// Keys whose values do not interact with cross-field validation, with a few valid values each.
const PRECEDENCE_KEYS: &[(&str, [&str; 3])] = &[
    ("seed", ["1", "99", "123456"]),
    ("learning_rate", ["0.001", "2e-4", "0.5"]),
    ("weight_decay", ["0", "0.01", "1e-6"]),
    ("batch_size", ["1", "16", "64"]),
    ("num_workers", ["0", "1", "8"]),
    ("num_epochs", ["1", "7", "2000"]),
    ("eta", ["0", "0.5", "1"]),
    ("guidance_weight", ["0", "1", "7.5"]),
    ("label_dropout_prob", ["0", "0.2", "0.5"]),
    ("beta_schedule", ["linear", "cosine", "'cosine'"]),
    ("sampler", ["ddpm", "ddim", "\"ddim\""]),
    ("flip_prob", ["0", "0.25", "1"]),
    ("log_every", ["1", "10", "100"]),
    ("beta_kl", ["0", "1e-3", "0.1"]),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn config_precedence_is_total(
        file in proptest::collection::vec(proptest::option::of(0usize..3), PRECEDENCE_KEYS.len()),
        flags in proptest::collection::vec(proptest::option::of(0usize..3), PRECEDENCE_KEYS.len()),
        env_seed in proptest::option::of(0u64..1000),
    ) {
        let pick = |choice: &[Option<usize>]| -> Vec<(String, String)> {
            PRECEDENCE_KEYS
                .iter()
                .zip(choice)
                .filter_map(|((k, vals), c)| c.map(|i| (k.to_string(), vals[i].to_string())))
                .collect()
        };
        let env = env_seed.map(|s| s.to_string());
        let cfg = RunConfig::resolve(env.as_deref(), &[pick(&file), pick(&flags)]).unwrap();
        for (i, (key, vals)) in PRECEDENCE_KEYS.iter().enumerate() {
            let winner = flags[i].or(file[i]).map(|j| vals[j].to_string());
            let mut expect = RunConfig::default();
            match (winner, *key == "seed", &env) {
                (Some(v), _, _) => expect.set(key, &v).unwrap(),
                (None, true, Some(e)) => expect.set(key, e).unwrap(),
                _ => {}
            }
            prop_assert_eq!(cfg.get(key), expect.get(key), "key {}", key);
        }
    }
}
