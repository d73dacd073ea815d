use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stemflow::batcher::{prepare_batch, BatchConfig, ConditionSet, GroupTask};
use stemflow::codec::{decode, detect_activity, encode, mix, normalize_mix, ActivityMask, StemLatent, LATENT_DIM};
use stemflow::corpus::{synthesize_composition, ActivityPlan, CorpusConfig, Dataset, StemType, NUM_STEM_TYPES};
use stemflow::eval::{frechet_distance, sync_coherence, FeatureVector};
use stemflow::model::{Model, ModelConfig, ModelInput};
use stemflow::sampler::{euler_sample, SampleConfig, SharedConditions, StemRequest, VelocityField};
use stemflow::Result;

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        Dataset::generate(&CorpusConfig {
            compositions: 24,
            seed: 31,
            ..CorpusConfig::default()
        })
        .unwrap()
    })
}

fn stems_of(comp: usize) -> Vec<stemflow::codec::StemWaveform> {
    synthesize_composition(&dataset().compositions[comp].spec).unwrap()
}

/// The ideal velocity for a corpus holding the single point `x0`.
struct SinglePoint(Vec<f64>);

impl VelocityField for SinglePoint {
    fn velocities(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<f64>>> {
        Ok(inputs
            .iter()
            .map(|i| i.x_t.iter().zip(&self.0).map(|(x, x0)| (x0 - x) / i.t).collect())
            .collect())
    }
}

fn tiny_model(seed: u64) -> Model {
    Model::init(ModelConfig {
        hidden_width: 8,
        num_blocks: 2,
        embed_dim: 4,
        time_features: 4,
        activity_dim: 4,
        parameter_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn codec_round_trip(comp in 0usize..24) {
        for w in stems_of(comp) {
            let back = decode(&encode(&w).unwrap(), w.stem_type);
            let err = back.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-9, "round trip error {err}");
        }
    }

    #[test]
    fn encode_is_linear(comp in 0usize..24, gains in prop::collection::vec(-2.0f64..2.0, NUM_STEM_TYPES)) {
        let stems = stems_of(comp);
        let g = &gains[..stems.len()];
        let lhs = encode(&mix(&stems, g).unwrap()).unwrap();
        let mut rhs = StemLatent::zeros(lhs.frames());
        for (s, &k) in stems.iter().zip(g) {
            rhs.add_scaled(&encode(s).unwrap(), k).unwrap();
        }
        for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn detected_activity_matches_plan(comp in 0usize..24) {
        let c = &dataset().compositions[comp];
        for (w, spec) in stems_of(comp).iter().zip(&c.spec.stems) {
            prop_assert!(spec.loudness_db >= -40.0);
            let mask = detect_activity(w, -60.0).unwrap();
            prop_assert_eq!(mask, spec.activity_plan.mask(c.spec.clip_frames));
        }
    }

    #[test]
    fn normalize_is_idempotent(comp in 0usize..24, target in -40.0f64..-3.0) {
        let stems = stems_of(comp);
        let once = normalize_mix(&mix(&stems, &vec![1.0; stems.len()]).unwrap(), target).unwrap();
        let twice = normalize_mix(&once, target).unwrap();
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!((20.0 * once.rms().log10() - target).abs() <= 1e-9);
    }

    #[test]
    fn mask_encodings_round_trip(bits in prop::collection::vec(any::<bool>(), 1..200)) {
        let mask = ActivityMask::new(bits);
        prop_assert_eq!(ActivityMask::from_bitstring(&mask.to_bitstring()).unwrap(), mask.clone());
        prop_assert_eq!(ActivityPlan::from_mask(&mask).mask(mask.len()), mask);
    }

    #[test]
    fn batch_structure(seed in any::<u64>(), b in 1usize..40, grouped in any::<bool>(), shared in any::<bool>()) {
        use stemflow::batcher::{GroupSampling, NoiseSharing};
        let config = BatchConfig {
            batch_size: b,
            group_sampling: if grouped { GroupSampling::Grouped } else { GroupSampling::Independent },
            noise_sharing: if shared { NoiseSharing::Shared } else { NoiseSharing::Independent },
            ..BatchConfig::default()
        };
        let data = dataset();
        let batch = prepare_batch(data, &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batch.entries.len(), b);
        prop_assert_eq!(batch.group_sizes().iter().sum::<usize>(), b);
        prop_assert!(batch.group_sizes().iter().all(|&s| s >= 1));
        for (g, info) in batch.groups.iter().enumerate() {
            let members: Vec<_> = batch.entries.iter().enumerate().filter(|(_, e)| e.group_id == g).collect();
            prop_assert_eq!(members.len(), info.stems.len());
            let comp = &data.compositions[info.composition];
            for &(i, e) in &members {
                prop_assert_eq!(e.composition_id, comp.id);
                prop_assert!(e.timestep > 0.0 && e.timestep < 1.0);
                if shared {
                    prop_assert_eq!(batch.noise_of(i), batch.noise_of(members[0].0));
                }
                let conditional = info.task == GroupTask::Conditional;
                prop_assert_eq!(e.conditions.submix.is_some(), conditional);
                prop_assert_eq!(e.conditions.context_types.is_empty(), !conditional);
                prop_assert_eq!(&e.conditions.submix, &members[0].1.conditions.submix);
            }
            if info.task == GroupTask::Conditional {
                prop_assert!(!info.context_stems.is_empty());
                prop_assert!(info.context_stems.iter().all(|s| !info.stems.contains(s)));
            } else {
                prop_assert!(info.context_stems.is_empty());
            }
        }
    }

    #[test]
    fn frechet_symmetric_and_zero_on_self(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 5..20),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 5..20),
    ) {
        let a: Vec<FeatureVector> = a.into_iter().map(FeatureVector).collect();
        let b: Vec<FeatureVector> = b.into_iter().map(FeatureVector).collect();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn sync_ignores_stem_order(comp in 0usize..24, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let stems = stems_of(comp);
        let mut shuffled = stems.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        prop_assert_eq!(sync_coherence(&stems).unwrap(), sync_coherence(&shuffled).unwrap());
    }

    #[test]
    fn euler_lands_on_single_point(
        steps in 1usize..80,
        cfg_scale in 0.0f64..5.0,
        seed in any::<u64>(),
        x0 in prop::collection::vec(-2.0f64..2.0, 24 * LATENT_DIM),
    ) {
        let config = SampleConfig { num_steps: steps, cfg_scale, seed, ..SampleConfig::default() };
        let shared = SharedConditions::new(0, 120, 24);
        let out = euler_sample(&SinglePoint(x0.clone()), &[StemRequest::new(StemType::Bass)], &shared, &config).unwrap();
        for (a, b) in out.latents[0].as_slice().iter().zip(&x0) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs(seed in 0u64..1000, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let model = tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 12;
        let conds: Vec<ConditionSet> = (0..5)
            .map(|i| ConditionSet::new(StemType::from_index(i).unwrap(), i % 4, 120))
            .collect();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..frames * LATENT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ts: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..0.99)).collect();
        let inputs: Vec<ModelInput<'_>> = (0..5).map(|i| ModelInput { x_t: &xs[i], t: ts[i], conditions: &conds[i] }).collect();
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted: Vec<ModelInput<'_>> = order.iter().map(|&i| inputs[i]).collect();
        let base = model.forward_batch(&inputs).unwrap();
        let moved = model.forward_batch(&permuted).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(&moved[k], &base[i]);
        }
    }
}
