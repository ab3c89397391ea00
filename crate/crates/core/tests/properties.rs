use edg_core::energy::{make_mog, make_ring_family, Energy, MixtureSpec, RingVariant};
use edg_core::eval::{histogram2d, mmd_rbf};
use edg_core::loss::{loss_on_draws, BatchDraws, LossVariant, ProposalConfig, TimeProposal};
use edg_core::model::{DecoderSpec, EncoderSpec, Model, ModelSpec};
use edg_core::score::ScoreConfig;
use edg_core::sde::SdeSchedule;
use edg_core::decoder::GhdConfig;
use edg_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 2), n)
}

fn reversed(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().rev().cloned().collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mmd_is_symmetric(x in points(12), y in points(12)) {
        let (tx, ty) = (Tensor::from_rows(&x), Tensor::from_rows(&y));
        let a = mmd_rbf(&tx, &ty).unwrap();
        let b = mmd_rbf(&ty, &tx).unwrap();
        prop_assert_eq!(a.bandwidth, b.bandwidth);
        prop_assert!(close(a.mmd_squared, b.mmd_squared, 1e-12));
    }

    #[test]
    fn mmd_ignores_row_order(x in points(10), y in points(10)) {
        let a = mmd_rbf(&Tensor::from_rows(&x), &Tensor::from_rows(&y)).unwrap();
        let b = mmd_rbf(&Tensor::from_rows(&reversed(&x)), &Tensor::from_rows(&reversed(&y))).unwrap();
        prop_assert_eq!(a.bandwidth, b.bandwidth);
        prop_assert!(close(a.mmd_squared, b.mmd_squared, 1e-12));
    }

    #[test]
    fn histogram_accounts_for_every_row(x in points(40), bins in 1usize..12) {
        let h = histogram2d(&Tensor::from_rows(&x), [(-3.0, 3.0), (-2.0, 2.0)], bins).unwrap();
        prop_assert_eq!(h.counts.len(), bins * bins);
        prop_assert_eq!(h.counts.iter().sum::<u64>() + h.spill, 40);
    }

    #[test]
    fn sde_coefficients_stay_in_range(t in 0.0f64..=1.0) {
        let c = SdeSchedule::default().coeffs(t).unwrap();
        prop_assert!(c.m > 0.0 && c.m <= 1.0);
        prop_assert!((0.0..1.0).contains(&c.sigma));
        prop_assert!(c.g2 >= 0.0);
        prop_assert!(close(c.m * c.m, c.a, 1e-14));
        let v = c.marginal_var();
        prop_assert!(v > 0.7 && v <= 1.0 + 1e-15);
    }

    #[test]
    fn energy_gradients_match_differences(x in prop::collection::vec(-6.0f64..6.0, 2)) {
        let targets: Vec<Box<dyn Energy>> = vec![
            Box::new(make_mog(MixtureSpec::mog6()).unwrap()),
            Box::new(make_ring_family(RingVariant::Ring5)),
        ];
        for e in &targets {
            let g = e.grad(&x);
            for i in 0..2 {
                let h = 1e-6;
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (e.energy(&p) - e.energy(&m)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "{} vs {}", fd, g[i]);
            }
        }
    }
}

fn tiny_model() -> (ModelSpec, Model, edg_core::model::ModelParams) {
    let spec = ModelSpec {
        decoder: DecoderSpec::Ghd(GhdConfig {
            d0: 2,
            k: 1,
            j: 1,
            init_hidden: vec![4],
            corr_hidden: vec![4],
            final_hidden: vec![4],
            step_hidden: vec![4],
            ..GhdConfig::for_dim(2)
        }),
        encoder: EncoderSpec::Diffusion(ScoreConfig {
            hidden: vec![4],
            ..Default::default()
        }),
        schedule: SdeSchedule::default(),
    };
    let (model, params) = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    (spec, model, params)
}

fn permute(t: &Tensor, idx: &[usize]) -> Tensor {
    t.select_rows(idx)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_is_invariant_to_batch_order(seed in any::<u64>(), shift in 1usize..6) {
        let (spec, model, params) = tiny_model();
        let energy = make_mog(MixtureSpec::mog2()).unwrap();
        let ctx = model.score_context(&params, &energy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for variant in [LossVariant::Hutchinson, LossVariant::Denoising] {
            let prop = TimeProposal::new(ProposalConfig::default(), spec.schedule, variant).unwrap();
            let d = BatchDraws::sample(&prop, spec.latent_dim(), 2, 6, &mut rng);
            let idx: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let p = BatchDraws {
                z0: permute(&d.z0, &idx),
                noise: permute(&d.noise, &idx),
                t: idx.iter().map(|&i| d.t[i]).collect(),
                density: idx.iter().map(|&i| d.density[i]).collect(),
                eta: permute(&d.eta, &idx),
                probe: permute(&d.probe, &idx),
            };
            let a = loss_on_draws(&ctx, variant, &d).unwrap();
            let b = loss_on_draws(&ctx, variant, &p).unwrap();
            prop_assert!(close(a.total, b.total, 1e-12), "{} vs {}", a.total, b.total);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert!(close(a.per_sample[i], b.per_sample[k], 1e-12));
            }
        }
    }
}
