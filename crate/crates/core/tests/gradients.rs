//! Analytic gradients against central differences for every loss, the full
//! objective and every anchor pooling method.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vtg_core::anchor::AnchorMethod;
use vtg_core::data::{generate_synthetic, SyntheticConfig};
use vtg_core::gradcheck::{check_gradients, loss_suite, GradCheckOptions};
use vtg_core::interaction::GateMode;
use vtg_core::model::{Model, ModelConfig};
use vtg_core::nn::Ctx;

#[test]
fn loss_suite_over_seeds() {
    for seed in 1..3 {
        let cases = loss_suite(seed, &GradCheckOptions { seed, ..Default::default() }).unwrap();
        for c in &cases {
            let r = &c.report;
            eprintln!(
                "seed {seed} {:8} max rel {:.2e} over {} coords, {} refined",
                c.name,
                r.max_rel_error(),
                r.coords(),
                r.refined()
            );
            assert!(r.max_rel_error() < 1e-3, "{}: {:?}", c.name, r.worst());
        }
    }
}

#[test]
fn forward_gradients_for_every_anchor_and_gate() {
    let samples = generate_synthetic(&SyntheticConfig {
        n_samples: 1,
        video_len: (6, 6),
        text_len: (4, 4),
        video_dim: 8,
        text_dim: 8,
        moment_width: (0.2, 0.4),
        ..Default::default()
    })
    .unwrap();
    let combos = AnchorMethod::ALL
        .iter()
        .map(|a| (*a, GateMode::Both))
        .chain([GateMode::None, GateMode::Local, GateMode::NonLocal].map(|g| (AnchorMethod::Mean, g)));
    for (anchor, gates) in combos {
        let cfg = ModelConfig {
            video_dim: 8,
            text_dim: 8,
            dim: 8,
            heads: 2,
            queries: 4,
            dropout: 0.0,
            anchor,
            gates,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (model, mut store) = Model::new(cfg, &mut rng).unwrap();
        // Off the zero-bias initialization, where the decoder's first layer
        // norms see zero variance.
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).mapv_inplace(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + 0.05 * z
            });
        }
        let s = &samples[0];
        let report = check_gradients(
            &store,
            |g, st| {
                let out = model.forward_sample(Ctx::new(g, st), s)?;
                let sal = g.sum(g.mul(out.saliency, out.saliency));
                let spans = g.sum(g.sin(g.scale(out.decoder.spans, 3.0)));
                Ok(g.add(sal, g.add(spans, g.sum(out.interaction.non_local_weights))))
            },
            &GradCheckOptions {
                coords_per_tensor: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_error() < 1e-3,
            "{anchor}/{gates}: {:?}",
            report.worst()
        );
    }
}
