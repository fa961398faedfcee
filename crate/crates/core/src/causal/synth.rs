//! Synthetic character-level corpus and task suites.
//!
//! A 64-token alphabet (space, period, newline, a-z, A-Z, the rest
//! reserved) and three sentence templates give a corpus small models learn
//! in minutes, with built-in probes for head-level analysis:
//!
//! * repetition: `Tom waved . Tom waved . Tom waved .` teaches copying a
//!   capitalized name across a sentence boundary,
//! * pronouns: `Eva smiled . she left .` teaches name-to-pronoun gender,
//! * binding: `Tom met Eva . he nodded .` teaches that the pronoun follows
//!   the first of two opposite-gender names.
//!
//! Every template is deterministic past its sampled names, so correct
//! next-token probabilities approach 1 in a trained model and intervention
//! deltas are attributable to the edited heads.

use super::{TaskCase, TaskKind};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Alphabet size used by the synthetic corpus.
pub const VOCAB: usize = 64;

pub const MALE_NAMES: [&str; 8] = ["Tom", "Bob", "Max", "Sam", "Ben", "Jim", "Dan", "Leo"];
pub const FEMALE_NAMES: [&str; 8] = ["Ann", "Eva", "Mia", "Sue", "Amy", "Kim", "Joy", "Fay"];

/// Maps a character to its token id.
pub fn char_id(c: char) -> Result<u32> {
    match c {
        ' ' => Ok(0),
        '.' => Ok(1),
        '\n' => Ok(2),
        'a'..='z' => Ok(3 + (c as u32 - 'a' as u32)),
        'A'..='Z' => Ok(29 + (c as u32 - 'A' as u32)),
        other => Err(Error::Data(format!("character {other:?} is outside the alphabet"))),
    }
}

/// Inverse of [`char_id`]; reserved ids are rejected.
pub fn id_char(id: u32) -> Result<char> {
    match id {
        0 => Ok(' '),
        1 => Ok('.'),
        2 => Ok('\n'),
        3..=28 => Ok(char::from(b'a' + (id - 3) as u8)),
        29..=54 => Ok(char::from(b'A' + (id - 29) as u8)),
        other => Err(Error::Data(format!("token id {other} is reserved"))),
    }
}

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars().map(char_id).collect()
}

pub fn decode(ids: &[u32]) -> Result<String> {
    ids.iter().map(|&id| id_char(id)).collect()
}

fn pronoun(name: &str) -> &'static str {
    if MALE_NAMES.contains(&name) {
        "he"
    } else {
        "she"
    }
}

fn repetition_sentence(name: &str) -> String {
    format!("{name} waved . {name} waved . {name} waved .\n")
}

fn pronoun_sentence(name: &str) -> String {
    format!("{name} smiled . {} left .\n", pronoun(name))
}

fn binding_sentence(first: &str, second: &str) -> String {
    format!("{first} met {second} . {} nodded .\n", pronoun(first))
}

/// Generates a training corpus of at least `min_tokens` tokens by sampling
/// the three templates uniformly. Deterministic in the seed.
pub fn training_corpus(seed: u64, min_tokens: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(min_tokens + 64);
    while tokens.len() < min_tokens {
        let text = match rng.gen_range(0..3u8) {
            0 => {
                let name = sample_name(&mut rng);
                repetition_sentence(name)
            }
            1 => {
                let name = sample_name(&mut rng);
                pronoun_sentence(name)
            }
            _ => {
                let male = MALE_NAMES[rng.gen_range(0..MALE_NAMES.len())];
                let female = FEMALE_NAMES[rng.gen_range(0..FEMALE_NAMES.len())];
                if rng.gen_bool(0.5) {
                    binding_sentence(male, female)
                } else {
                    binding_sentence(female, male)
                }
            }
        };
        tokens.extend(encode(&text).expect("templates stay inside the alphabet"));
    }
    tokens
}

fn sample_name(rng: &mut ChaCha8Rng) -> &'static str {
    let i = rng.gen_range(0..MALE_NAMES.len() + FEMALE_NAMES.len());
    if i < MALE_NAMES.len() {
        MALE_NAMES[i]
    } else {
        FEMALE_NAMES[i - MALE_NAMES.len()]
    }
}

fn first_letter_case(name: &str) -> (u32, u32) {
    let c = name.chars().next().expect("names are non-empty");
    let correct = char_id(c).expect("name initials are alphabetic");
    let incorrect = char_id(c.to_ascii_lowercase()).expect("alphabetic");
    (correct, incorrect)
}

/// Eight cases probing capitalized-name copying: after two repetitions the
/// model should restart the same name, uppercase first letter.
pub fn capitalization_suite() -> Vec<TaskCase> {
    let names = MALE_NAMES.iter().take(4).chain(FEMALE_NAMES.iter().take(4));
    names
        .map(|name| {
            let context = format!("{name} waved . {name} waved . ");
            let (correct, incorrect) = first_letter_case(name);
            TaskCase {
                task: TaskKind::Capitalization,
                context_ids: encode(&context).expect("alphabet"),
                correct_id: correct,
                incorrect_id: Some(incorrect),
            }
        })
        .collect()
}

fn pronoun_initials(name: &str) -> (u32, u32) {
    let h = char_id('h').expect("alphabet");
    let s = char_id('s').expect("alphabet");
    if MALE_NAMES.contains(&name) {
        (h, s)
    } else {
        (s, h)
    }
}

/// Sixteen cases probing the name-to-pronoun mapping, one per name.
pub fn gender_suite() -> Vec<TaskCase> {
    MALE_NAMES
        .iter()
        .chain(FEMALE_NAMES.iter())
        .map(|name| {
            let context = format!("{name} smiled . ");
            let (correct, incorrect) = pronoun_initials(name);
            TaskCase {
                task: TaskKind::Gender,
                context_ids: encode(&context).expect("alphabet"),
                correct_id: correct,
                incorrect_id: Some(incorrect),
            }
        })
        .collect()
}

/// Binding cases with two opposite-gender names: the pronoun follows the
/// first. Enumerates male-first and female-first pairs alternately and
/// returns the first `count` of the 128 combinations.
pub fn winograd_suite(count: usize) -> Result<Vec<TaskCase>> {
    let mut cases = Vec::new();
    for i in 0..MALE_NAMES.len() {
        for j in 0..FEMALE_NAMES.len() {
            for &(first, second) in &[
                (MALE_NAMES[i], FEMALE_NAMES[j]),
                (FEMALE_NAMES[j], MALE_NAMES[i]),
            ] {
                let context = format!("{first} met {second} . ");
                let (correct, incorrect) = pronoun_initials(first);
                cases.push(TaskCase {
                    task: TaskKind::Winograd,
                    context_ids: encode(&context).expect("alphabet"),
                    correct_id: correct,
                    incorrect_id: Some(incorrect),
                });
            }
        }
    }
    if count > cases.len() {
        return Err(Error::Config(format!(
            "asked for {count} binding cases, only {} distinct pairs exist",
            cases.len()
        )));
    }
    cases.truncate(count);
    Ok(cases)
}
