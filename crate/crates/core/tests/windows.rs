mod common;

use std::sync::Arc;
use std::thread;

use common::{brute_force_windows, replay_mismatches, sampled_windows, tagged_episode};
use proptest::prelude::*;
use vidguide::envs::EnvConfig;
use vidguide::explore::ReplayBuffer;
use vidguide::types::{Episode, EpisodeSource};
use vidguide::RngStream;

#[test]
fn sampler_reaches_exactly_the_enumerated_windows() {
    let mut rng = RngStream::new(9);
    let episodes: Vec<Episode> = (0..100).map(|e| tagged_episode(e, 1 + rng.below(40))).collect();
    assert_eq!(sampled_windows(&episodes, 16, 200_000, &mut rng), brute_force_windows(&episodes, 16));
}

#[test]
fn sampled_windows_carry_goal_and_chunk() {
    let b = ReplayBuffer::new(8).unwrap();
    for e in 0..8 {
        b.append(tagged_episode(e, 3 + 5 * e)).unwrap();
    }
    let mut rng = RngStream::new(1);
    for _ in 0..2000 {
        let w = b.sample_window(16, &mut rng).unwrap();
        let tag = w.obs.0[0] as usize;
        let (t, i) = (3 + 5 * (tag / 1000), tag % 1000);
        assert_eq!(w.goal.0[0] as usize, tag - i + (i + 16).min(t));
        assert_eq!(w.chunk.valid_len(), 16.min(t - i));
        for (j, a) in w.chunk.valid().iter().enumerate() {
            assert_eq!(a.as_continuous().unwrap()[0] as usize, i + j + 1);
        }
    }
}

#[test]
fn hindsight_windows_replay_bit_exactly_table() {
    assert_eq!(replay_mismatches(EnvConfig::table_sim(), 1000, 1), 0);
}

#[test]
fn hindsight_windows_replay_bit_exactly_grid() {
    assert_eq!(replay_mismatches(EnvConfig::grid_nav(), 1000, 2), 0);
}

#[test]
fn concurrent_appends_and_samples_see_whole_episodes() {
    let buffer = Arc::new(ReplayBuffer::new(64).unwrap());
    buffer.append(tagged_episode(0, 20)).unwrap();
    let ops = 100_000 / 8;
    let handles: Vec<_> = (0..8)
        .map(|w| {
            let b = Arc::clone(&buffer);
            thread::spawn(move || {
                let mut rng = RngStream::new(w);
                for k in 0..ops {
                    if w % 2 == 0 {
                        b.append(tagged_episode(1 + (k % 900), 5 + (k % 30))).unwrap();
                    } else {
                        let win = b.sample_window(16, &mut rng).unwrap();
                        let tag = win.obs.0[0] as usize;
                        let goal = win.goal.0[0] as usize;
                        assert_eq!(tag / 1000, goal / 1000, "window spans two episodes");
                        assert_eq!(goal - tag, win.chunk.valid_len());
                        for (j, a) in win.chunk.valid().iter().enumerate() {
                            assert_eq!(a.as_continuous().unwrap()[0] as usize, tag % 1000 + j + 1);
                        }
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(buffer.len() <= 64);
    assert_eq!(buffer.appended(EpisodeSource::Random), 1 + 4 * ops as u64);
    assert_eq!(buffer.evicted(), buffer.appended(EpisodeSource::Random) - buffer.len() as u64);
}

proptest! {
    #[test]
    fn buffer_never_exceeds_capacity(cap in 1usize..10, lens in proptest::collection::vec(1usize..30, 1..40)) {
        let b = ReplayBuffer::new(cap).unwrap();
        for (e, t) in lens.iter().enumerate() {
            b.append(tagged_episode(e, *t)).unwrap();
            prop_assert!(b.len() <= cap);
        }
        let kept: Vec<usize> = b.snapshot().iter().map(|ep| ep.observations()[0].0[0] as usize / 1000).collect();
        let first = lens.len().saturating_sub(cap);
        prop_assert_eq!(kept, (first..lens.len()).collect::<Vec<_>>());
    }

    #[test]
    fn windows_respect_horizon(t in 1usize..50, h in 1usize..24, seed in any::<u64>()) {
        let b = ReplayBuffer::new(1).unwrap();
        b.append(tagged_episode(0, t)).unwrap();
        let w = b.sample_window(h, &mut RngStream::new(seed)).unwrap();
        let i = w.obs.0[0] as usize;
        prop_assert!(i <= t.saturating_sub(h));
        prop_assert_eq!(w.chunk.horizon(), h);
        prop_assert_eq!(w.chunk.valid_len(), h.min(t - i));
        prop_assert_eq!(w.goal.0[0] as usize, (i + h).min(t));
    }
}
