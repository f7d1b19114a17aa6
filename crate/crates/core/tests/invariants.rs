use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use masked_diffuse::eval::{length_accuracy, mentions, settle_steps};
use masked_diffuse::guidance::{mbr_loss, mbr_select, ControlSpec};
use masked_diffuse::schedule::{q_sample, MaskState, NoiseSchedule, Staging};
use masked_diffuse::tensor::Latent;

proptest! {
    #[test]
    fn schedule_is_bounded_and_monotone(steps in 2usize..800, s in 1e-6f64..1e-2) {
        let sched = NoiseSchedule::new(steps, s, 1e-5).unwrap();
        for t in 1..=steps {
            let (a, b) = (sched.alpha_bar(t - 1), sched.alpha_bar(t));
            prop_assert!(b <= a && b >= 1e-5 && a <= 1.0);
            prop_assert!((0.0..1.0).contains(&sched.beta(t)));
        }
    }

    #[test]
    fn more_important_buckets_activate_earlier(
        bucket in prop::collection::vec(1usize..=3, 1..12),
        steps in 6usize..600,
        window in any::<bool>(),
    ) {
        let staging = if window { Staging::Window } else { Staging::Cumulative };
        let m = MaskState::from_bucket_ids(&bucket, 3, steps, staging);
        let sched = NoiseSchedule::new(steps, 1e-4, 1e-5).unwrap();
        for i in 0..bucket.len() {
            prop_assert!(m.activation[i] < m.end[i] && m.end[i] <= steps);
            for j in 0..bucket.len() {
                if bucket[i] < bucket[j] {
                    prop_assert!(m.activation[i] < m.activation[j]);
                }
            }
            let mut prev = 1.0;
            for t in 0..=steps {
                let r = m.retention(i, t, &sched);
                prop_assert!(r > 0.0 && r <= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn clean_tokens_pass_through_q_sample(
        bucket in prop::collection::vec(1usize..=3, 1..10),
        t in 0usize..=60,
        seed in any::<u64>(),
    ) {
        let m = MaskState::from_bucket_ids(&bucket, 3, 60, Staging::Cumulative);
        let sched = NoiseSchedule::new(60, 1e-4, 1e-5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Latent::<f64>::randn(bucket.len(), 3, 1.0, &mut rng);
        let x = q_sample(&x0, t, &m, &sched, &mut rng).unwrap();
        for i in 0..bucket.len() {
            prop_assert_eq!(x.row(i) == x0.row(i), !m.is_masked(i, t));
        }
    }

    #[test]
    fn mbr_choice_minimises_risk(cands in prop::collection::vec(prop::collection::vec(3u32..10, 1..7), 1..12)) {
        let i = mbr_select(&cands, |a, b| mbr_loss(a, b)).unwrap();
        let risk = |k: usize| -> f64 {
            (0..cands.len()).filter(|&j| j != k).map(|j| mbr_loss(&cands[k], &cands[j])).sum()
        };
        for k in 0..cands.len() {
            prop_assert!(risk(i) <= risk(k));
        }
    }

    #[test]
    fn mbr_loss_is_smallest_against_itself(a in prop::collection::vec(3u32..10, 1..9), b in prop::collection::vec(3u32..10, 1..9)) {
        prop_assert!(mbr_loss(&a, &a) <= mbr_loss(&a, &b) + 1e-12);
        let l = mbr_loss(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&l));
    }

    #[test]
    fn settle_step_marks_a_stable_suffix(trace in prop::collection::vec(prop::collection::vec(0u32..3, 4), 1..10)) {
        let last = trace.last().unwrap();
        for (i, &k) in settle_steps(&trace).iter().enumerate() {
            prop_assert!(trace[k..].iter().all(|row| row[i] == last[i]));
            prop_assert!(k == 0 || trace[k - 1][i] != last[i]);
        }
    }

    #[test]
    fn length_accuracy_allows_two_words_of_slack(lens in prop::collection::vec((1usize..10, 1usize..10), 1..20)) {
        let outputs: Vec<Vec<String>> = lens.iter().map(|&(n, _)| vec!["w".to_string(); n]).collect();
        let targets: Vec<usize> = lens.iter().map(|p| p.1).collect();
        let acc = length_accuracy(&outputs, &targets).unwrap();
        let expect = lens.iter().filter(|p| p.0.abs_diff(p.1) <= 2).count() as f64 / lens.len() as f64;
        prop_assert!((acc - expect).abs() < 1e-12);
    }

    #[test]
    fn a_sentence_mentions_its_own_words(words in prop::collection::vec("[a-z]{1,6}", 1..8), k in 0usize..8) {
        let w = &words[k % words.len()];
        prop_assert!(mentions(&words, w));
    }

    #[test]
    fn length_controls_round_trip(n in 1usize..200) {
        let c = ControlSpec::Length { target: n };
        prop_assert_eq!(c.to_string().parse::<ControlSpec>().unwrap(), c);
    }
}
