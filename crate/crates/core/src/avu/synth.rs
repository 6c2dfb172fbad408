use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avu::{MetaKey, SampleRecord};

const SUBJECTS: &[&str] = &[
    "a dog",
    "a child",
    "a street musician",
    "a train",
    "two birds",
    "a chef",
    "a drummer",
    "an old car",
];
const ACTIONS: &[&str] = &[
    "runs",
    "plays",
    "passes by",
    "sits still",
    "cooks",
    "waits",
    "moves slowly",
    "jumps",
];
const PLACES: &[&str] = &[
    "park", "kitchen", "station", "beach", "street", "forest", "stage", "garage",
];
const SOUNDS: &[&str] = &[
    "barking",
    "laughter",
    "guitar music",
    "a horn",
    "chirping",
    "sizzling",
    "drum beats",
    "an engine",
];
const EVENTS: &[&str] = &[
    "dog barking",
    "people talking",
    "music playing",
    "vehicle passing",
    "birds singing",
    "cooking",
];
const EMOTIONS: &[&str] = &["calm", "joyful", "tense", "neutral"];
const SCENES: &[&str] = &["outdoor daytime", "indoor", "night street", "crowded"];

/// A seeded corpus of plausible unscored records with ids `avu-00000…`.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synthetic_record(&mut rng, i)).collect()
}

fn one<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).copied().unwrap_or("")
}

fn synthetic_record(rng: &mut ChaCha8Rng, i: usize) -> SampleRecord {
    let (subject, action, place, sound) = (
        one(rng, SUBJECTS),
        one(rng, ACTIONS),
        one(rng, PLACES),
        one(rng, SOUNDS),
    );
    let mut r = SampleRecord::new(
        &format!("avu-{i:05}"),
        &format!("{subject} {action} in the {place}"),
        &format!("{sound} can be heard"),
    );
    let object = String::from(
        subject
            .trim_start_matches("a ")
            .trim_start_matches("an ")
            .trim_start_matches("two "),
    );
    let meta = [
        (MetaKey::Event, one(rng, EVENTS).into()),
        (MetaKey::Object, object.clone()),
        (MetaKey::Scene, one(rng, SCENES).into()),
        (MetaKey::Place, place.into()),
        (MetaKey::Action, action.into()),
        (MetaKey::Emotion, one(rng, EMOTIONS).into()),
    ];
    for (k, v) in meta {
        r.meta_info.insert(k, alloc::vec![v]);
    }
    r.keywords = alloc::vec![object, String::from(sound)];
    r.has_task_annotation = rng.random_bool(0.1);
    r
}
