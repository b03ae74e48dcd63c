use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use vgsi_core::corpus::{split_by_goal, PromptLevel};
use vgsi_core::keyframes::{kmeans_cluster, nearest_frames};
use vgsi_core::sampler::{make_question_set, Strategy, NUM_CHOICES};
use vgsi_core::synth::{generate_synthetic, SynthSpec};
use vgsi_core::transfer::{build_kshot_set, group_by_goal, split_goals};

fn spec(clusters: usize, seed: u64) -> SynthSpec {
    SynthSpec { clusters, seed, dim_image: 8, dim_text: 8, ..SynthSpec::default() }
}

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![Just(Strategy::Random), Just(Strategy::Similarity), Just(Strategy::Category)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_questions_are_well_formed(clusters in 8usize..30, seed in any::<u64>(), strat in strategy(), step_level in any::<bool>()) {
        let data = generate_synthetic(&spec(clusters, seed)).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let level = if step_level { PromptLevel::Step } else { PromptLevel::Goal };
        let set = make_question_set(&data.corpus, &data.images, &ids, strat, level, seed).unwrap();
        for q in &set.questions {
            q.validate(&data.corpus).unwrap();
            let cands = q.candidates();
            prop_assert_eq!(cands.len(), NUM_CHOICES);
            prop_assert_eq!(cands[q.gold_position], q.gold_image_id.as_str());
            prop_assert_eq!(cands.iter().collect::<HashSet<_>>().len(), NUM_CHOICES);
            let gold_article = data.corpus.locate_image(&q.gold_image_id).unwrap().article;
            prop_assert_eq!(&data.corpus.articles()[gold_article].article_id, &q.article_id);
            if strat == Strategy::Category {
                let cat = &data.corpus.articles()[gold_article].category;
                for d in &q.distractor_image_ids {
                    let a = data.corpus.locate_image(d).unwrap().article;
                    prop_assert_eq!(&data.corpus.articles()[a].category, cat);
                }
            }
        }
        let again = make_question_set(&data.corpus, &data.images, &ids, strat, level, seed).unwrap();
        prop_assert_eq!(set.questions, again.questions);
    }

    #[test]
    fn goal_split_is_a_partition(clusters in 1usize..60, seed in any::<u64>(), train in 0.0f64..1.0, val_share in 0.0f64..1.0) {
        let data = generate_synthetic(&spec(clusters, 0)).unwrap();
        let val = (1.0 - train) * val_share;
        let split = split_by_goal(&data.corpus, [train, val, 1.0 - train - val], seed).unwrap();
        let mut all: Vec<String> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
        prop_assert_eq!(all.len(), clusters);
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), clusters);
        prop_assert!((split.train.len() as f64 - clusters as f64 * train).abs() <= 0.5 + 1e-9);

        let goals: Vec<String> = (0..clusters).map(|i| format!("g{i}")).collect();
        let (a, b) = split_goals(&goals, train, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), clusters);
        prop_assert!(a.iter().all(|g| !b.contains(g)));
    }

    #[test]
    fn kshot_sets_grow_by_prefix(clusters in 4usize..20, seed in any::<u64>(), k in 0usize..6) {
        let data = generate_synthetic(&spec(clusters, 1)).unwrap();
        let ids: Vec<String> = data.corpus.articles().iter().map(|a| a.article_id.clone()).collect();
        let qs = make_question_set(&data.corpus, &data.images, &ids, Strategy::Random, PromptLevel::Step, 0).unwrap().questions;
        let by_goal = group_by_goal(qs);
        let small: BTreeSet<String> = build_kshot_set(&by_goal, k, seed).into_iter().map(|q| q.step_id).collect();
        let large = build_kshot_set(&by_goal, k + 1, seed);
        let large_ids: BTreeSet<String> = large.iter().map(|q| q.step_id.clone()).collect();
        prop_assert!(small.is_subset(&large_ids));
        for (goal, qs) in &by_goal {
            let n = large.iter().filter(|q| &q.article_id == goal).count();
            prop_assert_eq!(n, (k + 1).min(qs.len()));
        }
    }

    #[test]
    fn kmeans_assigns_every_frame_to_its_nearest_centroid(
        frames in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 1..40),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let k = k.min(frames.len());
        let r = kmeans_cluster(&frames, k, seed, 100).unwrap();
        prop_assert_eq!(r.centroids.len(), k);
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for (f, &c) in frames.iter().zip(&r.assignment) {
            let d = |c: &Vec<f64>| c.iter().zip(f).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = r.centroids.iter().map(d).fold(f64::INFINITY, f64::min);
            prop_assert!(d(&r.centroids[c]) <= best + 1e-9);
        }
        let picked = nearest_frames(&frames, &r.centroids);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.len() <= k);
    }
}
