//! Synthetic Greater-Than, IOI-style, and Gendered-Pronoun datasets.
//!
//! Text is tokenized by whitespace; every word, name, and two-digit year is a
//! single token. Year tokens `"00".."99"` take ids 0..=99 and also serve as
//! century tokens, so "1743" is the pair `17 43`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GT_TEMPLATES: [&str; 5] = [
    "The {noun} lasted from the year {cc} {yy} to the year {cc}",
    "The {noun} stretched from the year {cc} {yy} to the year {cc}",
    "The {noun} spanned the years {cc} {yy} to {cc}",
    "The {noun} unfolded from the year {cc} {yy} to the year {cc}",
    "The {noun} took place from the year {cc} {yy} to the year {cc}",
];

const GT_NOUNS: [&str; 20] = [
    "war",
    "expedition",
    "siege",
    "reign",
    "dynasty",
    "famine",
    "drought",
    "rebellion",
    "occupation",
    "migration",
    "festival",
    "campaign",
    "trial",
    "voyage",
    "crusade",
    "plague",
    "revolution",
    "construction",
    "journey",
    "conflict",
];

/// Centuries of start years (1100..=2199).
const GT_CENTURIES: std::ops::RangeInclusive<u32> = 11..=21;

/// Two-digit start values; 00, 01 and 99 are excluded so both answer sets
/// are nonempty and the "01" corruption always changes the input.
const GT_YEARS: std::ops::RangeInclusive<u32> = 2..=98;

/// Two-digit value substituted for the start year by the corruption.
pub const GT_CORRUPT_YEAR: u32 = 1;

const IOI_TEMPLATES: [&str; 5] = [
    "Then , {x} and {y} had a long argument . Afterwards , {s} said to",
    "Friends {x} and {y} found a mango at the bar . {s} gave it to",
    "When {x} and {y} got a drink at the store , {s} gave it to",
    "After {x} and {y} went to the park , {s} gave a ball to",
    "While {x} and {y} were working at the office , {s} handed a book to",
];

const GP_TEMPLATES: [&str; 6] = [
    "So {name} is a really {adj} friend , isn't",
    "{name} is such a {adj} student , isn't",
    "Well , {name} is a very {adj} neighbor , isn't",
    "I think {name} is a {adj} teacher , isn't",
    "Everyone says {name} is a {adj} person , isn't",
    "Honestly , {name} is always a {adj} colleague , isn't",
];

const GP_ADJECTIVES: [&str; 8] = ["great", "good", "kind", "loyal", "funny", "honest", "clever", "generous"];

pub const MALE_NAMES: [&str; 40] = [
    "Evan", "John", "Michael", "David", "James", "Robert", "Daniel", "Matthew", "Andrew", "Joseph", "Ryan", "Kevin", "Brian",
    "Jason", "Eric", "Adam", "Mark", "Paul", "Steven", "Thomas", "Peter", "Jacob", "Nathan", "Tyler", "Aaron", "Kyle", "Sean",
    "Jeremy", "Justin", "Brandon", "Patrick", "Gregory", "Scott", "Luke", "Henry", "Samuel", "Ethan", "Noah", "Caleb", "Isaac",
];

pub const FEMALE_NAMES: [&str; 40] = [
    "Juana", "Kristi", "Mary", "Sarah", "Emily", "Jessica", "Ashley", "Hannah", "Rachel", "Laura", "Megan", "Lauren", "Amanda",
    "Nicole", "Rebecca", "Anna", "Emma", "Olivia", "Sophia", "Grace", "Chloe", "Julia", "Claire", "Alice", "Rose", "Lucy",
    "Natalie", "Victoria", "Katie", "Amy", "Linda", "Susan", "Karen", "Helen", "Diana", "Monica", "Erin", "Holly", "Paige",
    "Vanessa",
];

/// Bijective word ↔ id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; duplicates are an error.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The fixed vocabulary shared by all three tasks.
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens: Vec<String> = (0..100).map(|y| format!("{y:02}")).collect();
            tokens.extend(["he", "she"].map(String::from));
            tokens.extend(MALE_NAMES.iter().chain(&FEMALE_NAMES).map(|s| s.to_string()));
            let words = GT_TEMPLATES
                .iter()
                .chain(&IOI_TEMPLATES)
                .chain(&GP_TEMPLATES)
                .flat_map(|t| t.split_whitespace())
                .filter(|w| !w.starts_with('{'))
                .chain(GT_NOUNS)
                .chain(GP_ADJECTIVES);
            for w in words {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
            Vocabulary::from_tokens(tokens).expect("standard vocabulary is duplicate-free")
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::Dataset(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// Id of the two-digit token `yy`.
    pub fn year(&self, yy: u32) -> Result<usize> {
        if yy > 99 {
            return Err(Error::InvalidYear(yy));
        }
        self.id(&format!("{yy:02}"))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Gt,
    Ioi,
    Gp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Gt => "gt",
            Task::Ioi => "ioi",
            Task::Gp => "gp",
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<Vec<TaskExample>> {
        match self {
            Task::Gt => gen_gt(n, seed),
            Task::Ioi => gen_ioi(n, seed),
            Task::Gp => gen_gp(n, seed),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Task::Gt),
            "ioi" => Ok(Task::Ioi),
            "gp" => Ok(Task::Gp),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?}; expected gt, ioi or gp"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum AnswerSpec {
    Gt { y_start: u32 },
    Ioi { io_token: usize, s_token: usize },
    Gp { consistent_token: usize, inconsistent_token: usize },
}

impl AnswerSpec {
    pub fn task(&self) -> Task {
        match self {
            AnswerSpec::Gt { .. } => Task::Gt,
            AnswerSpec::Ioi { .. } => Task::Ioi,
            AnswerSpec::Gp { .. } => Task::Gp,
        }
    }

    /// Tokens a capable model should predict; base training spreads its
    /// target mass uniformly over them.
    pub fn target_tokens(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        match *self {
            AnswerSpec::Gt { y_start } => (y_start + 1..=99).map(|y| vocab.year(y)).collect(),
            AnswerSpec::Ioi { io_token, .. } => Ok(vec![io_token]),
            AnswerSpec::Gp { consistent_token, .. } => Ok(vec![consistent_token]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskExample {
    pub clean: Vec<usize>,
    pub corrupt: Vec<usize>,
    /// Position whose next-token distribution is scored.
    pub answer_position: usize,
    pub spec: AnswerSpec,
}

impl TaskExample {
    pub fn validate(&self) -> Result<()> {
        if self.clean.len() != self.corrupt.len() {
            return Err(Error::LengthMismatch { clean: self.clean.len(), corrupt: self.corrupt.len() });
        }
        if self.answer_position >= self.clean.len() {
            return Err(Error::Dataset(format!(
                "answer position {} outside sequence of length {}",
                self.answer_position,
                self.clean.len()
            )));
        }
        if self.clean == self.corrupt {
            return Err(Error::Dataset("corruption left the input unchanged".into()));
        }
        Ok(())
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    slots.iter().fold(template.to_string(), |t, (k, v)| t.replace(&format!("{{{k}}}"), v))
}

/// Draws `n` examples with pairwise distinct fill tuples.
fn unique<K: Eq + std::hash::Hash>(
    n: usize,
    space: usize,
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng, usize) -> K,
    mut build: impl FnMut(&K, &mut ChaCha8Rng) -> Result<TaskExample>,
) -> Result<Vec<TaskExample>> {
    if n > space {
        return Err(Error::Dataset(format!("requested {n} examples but only {space} distinct fills exist")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let key = draw(&mut rng, out.len());
        if seen.contains(&key) {
            continue;
        }
        out.push(build(&key, &mut rng)?);
        seen.insert(key);
    }
    Ok(out)
}

/// Greater-Than prompts ending in the century token of the start year.
pub fn gen_gt(n: usize, seed: u64) -> Result<Vec<TaskExample>> {
    let vocab = Vocabulary::standard();
    let space = GT_TEMPLATES.len() * GT_NOUNS.len() * GT_CENTURIES.count() * GT_YEARS.count();
    unique(
        n,
        space,
        seed,
        |rng, _| {
            (
                rng.random_range(0..GT_TEMPLATES.len()),
                rng.random_range(0..GT_NOUNS.len()),
                rng.random_range(GT_CENTURIES),
                rng.random_range(GT_YEARS),
            )
        },
        |&(t, noun, cc, yy), _| {
            let text = |y: u32| {
                fill(GT_TEMPLATES[t], &[("noun", GT_NOUNS[noun]), ("cc", &format!("{cc:02}")), ("yy", &format!("{y:02}"))])
            };
            let clean = vocab.encode(&text(yy))?;
            let corrupt = vocab.encode(&text(GT_CORRUPT_YEAR))?;
            Ok(TaskExample { answer_position: clean.len() - 1, clean, corrupt, spec: AnswerSpec::Gt { y_start: yy } })
        },
    )
}

/// How IOI prompts are corrupted.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoiCorruption {
    /// Replace the second mention of the subject with a fresh name.
    #[default]
    FreshSubject,
    /// Replace all three name slots with three fresh names.
    FreshAll,
}

fn all_names() -> impl Iterator<Item = &'static str> {
    MALE_NAMES.iter().chain(&FEMALE_NAMES).copied()
}

/// IOI prompts "… A and B … B gave it to" with answer A.
pub fn gen_ioi(n: usize, seed: u64) -> Result<Vec<TaskExample>> {
    gen_ioi_with(n, seed, IoiCorruption::default())
}

pub fn gen_ioi_with(n: usize, seed: u64, corruption: IoiCorruption) -> Result<Vec<TaskExample>> {
    let vocab = Vocabulary::standard();
    let names: Vec<&str> = all_names().collect();
    let k = names.len();
    let space = IOI_TEMPLATES.len() * 2 * k * (k - 1);
    unique(
        n,
        space,
        seed,
        |rng, _| {
            let a = rng.random_range(0..k);
            let b = (a + rng.random_range(1..k)) % k;
            (rng.random_range(0..IOI_TEMPLATES.len()), rng.random_bool(0.5), a, b)
        },
        |&(t, abba, a, b), rng| {
            let fresh = |rng: &mut ChaCha8Rng, avoid: &[usize]| loop {
                let z = rng.random_range(0..k);
                if !avoid.contains(&z) {
                    break z;
                }
            };
            let (x, y) = if abba { (a, b) } else { (b, a) };
            let text =
                |x: usize, y: usize, s: usize| fill(IOI_TEMPLATES[t], &[("x", names[x]), ("y", names[y]), ("s", names[s])]);
            let clean = vocab.encode(&text(x, y, b))?;
            let corrupt = match corruption {
                IoiCorruption::FreshSubject => {
                    let z = fresh(rng, &[a, b]);
                    vocab.encode(&text(x, y, z))?
                }
                IoiCorruption::FreshAll => {
                    let p = fresh(rng, &[a, b]);
                    let q = fresh(rng, &[a, b, p]);
                    let r = fresh(rng, &[a, b, p, q]);
                    vocab.encode(&text(p, q, r))?
                }
            };
            let spec = AnswerSpec::Ioi { io_token: vocab.id(names[a])?, s_token: vocab.id(names[b])? };
            Ok(TaskExample { answer_position: clean.len() - 1, clean, corrupt, spec })
        },
    )
}

/// Gendered-pronoun prompts "… {name} is … , isn't"; genders alternate so
/// the counts differ by at most one.
pub fn gen_gp(n: usize, seed: u64) -> Result<Vec<TaskExample>> {
    let vocab = Vocabulary::standard();
    let per_gender = GP_TEMPLATES.len() * MALE_NAMES.len().min(FEMALE_NAMES.len()) * GP_ADJECTIVES.len();
    let (he, she) = (vocab.id("he")?, vocab.id("she")?);
    unique(
        n,
        2 * per_gender,
        seed,
        |rng, i| {
            let male = i % 2 == 0;
            let pool = if male { MALE_NAMES.len() } else { FEMALE_NAMES.len() };
            (male, rng.random_range(0..GP_TEMPLATES.len()), rng.random_range(0..pool), rng.random_range(0..GP_ADJECTIVES.len()))
        },
        |&(male, t, name, adj), rng| {
            let (own, other) = if male { (&MALE_NAMES, &FEMALE_NAMES) } else { (&FEMALE_NAMES, &MALE_NAMES) };
            let swap = *other.choose(rng).expect("name lists are nonempty");
            let text = |nm: &str| fill(GP_TEMPLATES[t], &[("name", nm), ("adj", GP_ADJECTIVES[adj])]);
            let clean = vocab.encode(&text(own[name]))?;
            let corrupt = vocab.encode(&text(swap))?;
            let (consistent_token, inconsistent_token) = if male { (he, she) } else { (she, he) };
            Ok(TaskExample {
                answer_position: clean.len() - 1,
                clean,
                corrupt,
                spec: AnswerSpec::Gp { consistent_token, inconsistent_token },
            })
        },
    )
}

/// Consecutive, non-overlapping slices of `examples` with the given sizes.
/// Generated examples have distinct fill tuples, so the parts are disjoint.
pub fn split(examples: &[TaskExample], sizes: &[usize]) -> Result<Vec<Vec<TaskExample>>> {
    let total: usize = sizes.iter().sum();
    if total > examples.len() {
        return Err(Error::Dataset(format!("splits need {total} examples, have {}", examples.len())));
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&n| {
            let part = examples[start..start + n].to_vec();
            start += n;
            part
        })
        .collect())
}

pub fn write_jsonl(examples: &[TaskExample], mut out: impl Write) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TaskExample = serde_json::from_str(&line).map_err(|err| Error::Dataset(format!("line {}: {err}", i + 1)))?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> &'static Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn vocabulary_shape() {
        let vocab = v();
        assert!(vocab.len() < 2000);
        for y in 0..100 {
            assert_eq!(vocab.year(y).unwrap(), y as usize);
        }
        assert!(vocab.year(100).is_err());
        for (i, t) in vocab.tokens.iter().enumerate() {
            assert_eq!(vocab.id(t).unwrap(), i);
        }
        assert_eq!(
            vocab.decode(&vocab.encode("So Evan is a really great friend , isn't").unwrap()),
            "So Evan is a really great friend , isn't"
        );
    }

    #[test]
    fn gt_example_1743() {
        let vocab = v();
        let text = fill(GT_TEMPLATES[0], &[("noun", "war"), ("cc", "17"), ("yy", "43")]);
        assert_eq!(text, "The war lasted from the year 17 43 to the year 17");
        let ids = vocab.encode(&text).unwrap();
        assert_eq!(*ids.last().unwrap(), vocab.year(17).unwrap());
        let corrupt = vocab.encode(&fill(GT_TEMPLATES[0], &[("noun", "war"), ("cc", "17"), ("yy", "01")])).unwrap();
        assert_eq!(vocab.decode(&corrupt), "The war lasted from the year 17 01 to the year 17");
        assert_eq!(corrupt.len(), ids.len());
    }

    #[test]
    fn gt_generation() {
        let vocab = v();
        let data = gen_gt(500, 3).unwrap();
        assert_eq!(data.len(), 500);
        for e in &data {
            e.validate().unwrap();
            let AnswerSpec::Gt { y_start } = e.spec else { panic!() };
            assert!((2..=98).contains(&y_start));
            let diff: Vec<usize> = (0..e.clean.len()).filter(|&i| e.clean[i] != e.corrupt[i]).collect();
            assert_eq!(diff.len(), 1);
            assert_eq!(e.clean[diff[0]], vocab.year(y_start).unwrap());
            assert_eq!(e.corrupt[diff[0]], vocab.year(1).unwrap());
            assert_eq!(e.clean[e.answer_position], e.clean[diff[0] - 1]);
        }
        assert_eq!(gen_gt(500, 3).unwrap(), data);
        assert_ne!(gen_gt(500, 4).unwrap(), data);
    }

    #[test]
    fn ioi_generation() {
        let vocab = v();
        let text = fill(IOI_TEMPLATES[1], &[("x", "Juana"), ("y", "Kristi"), ("s", "Kristi")]);
        assert_eq!(text, "Friends Juana and Kristi found a mango at the bar . Kristi gave it to");
        for corruption in [IoiCorruption::FreshSubject, IoiCorruption::FreshAll] {
            for e in gen_ioi_with(400, 5, corruption).unwrap() {
                e.validate().unwrap();
                let AnswerSpec::Ioi { io_token, s_token } = e.spec else { panic!() };
                assert_ne!(io_token, s_token);
                assert_eq!(e.clean.iter().filter(|&&t| t == s_token).count(), 2);
                assert_eq!(e.clean.iter().filter(|&&t| t == io_token).count(), 1);
                if corruption == IoiCorruption::FreshSubject {
                    let diff: Vec<usize> = (0..e.clean.len()).filter(|&i| e.clean[i] != e.corrupt[i]).collect();
                    assert_eq!(diff.len(), 1);
                    let z = e.corrupt[diff[0]];
                    assert!(z != io_token && z != s_token);
                    assert_eq!(e.clean[diff[0]], s_token);
                    assert!(MALE_NAMES.iter().chain(&FEMALE_NAMES).any(|n| vocab.id(n).unwrap() == z));
                }
            }
        }
    }

    #[test]
    fn gp_generation() {
        let vocab = v();
        let data = gen_gp(301, 9).unwrap();
        let male = data
            .iter()
            .filter(|e| matches!(e.spec, AnswerSpec::Gp { consistent_token, .. } if consistent_token == vocab.id("he").unwrap()))
            .count();
        assert!((male as i64 - (301 - male) as i64).abs() <= 1);
        for e in &data {
            e.validate().unwrap();
            let AnswerSpec::Gp { consistent_token, .. } = e.spec else { panic!() };
            let diff: Vec<usize> = (0..e.clean.len()).filter(|&i| e.clean[i] != e.corrupt[i]).collect();
            assert_eq!(diff.len(), 1);
            let is_male = |t: usize| MALE_NAMES.iter().any(|n| vocab.id(n).unwrap() == t);
            assert_eq!(is_male(e.clean[diff[0]]), consistent_token == vocab.id("he").unwrap());
            assert_ne!(is_male(e.clean[diff[0]]), is_male(e.corrupt[diff[0]]));
            assert_eq!(vocab.token(*e.clean.last().unwrap()), Some("isn't"));
        }
        let evan = vocab.encode(&fill(GP_TEMPLATES[0], &[("name", "Evan"), ("adj", "great")])).unwrap();
        assert_eq!(vocab.decode(&evan), "So Evan is a really great friend , isn't");
    }

    #[test]
    fn splits_are_disjoint() {
        for task in [Task::Gt, Task::Ioi, Task::Gp] {
            let data = task.generate(300, 1).unwrap();
            let parts = split(&data, &[150, 50, 100]).unwrap();
            let keys: Vec<HashSet<&Vec<usize>>> = parts.iter().map(|p| p.iter().map(|e| &e.clean).collect()).collect();
            assert_eq!(keys.iter().map(|k| k.len()).sum::<usize>(), 300);
            for i in 0..3 {
                for j in i + 1..3 {
                    assert!(keys[i].is_disjoint(&keys[j]));
                }
            }
        }
        assert!(split(&gen_gt(10, 0).unwrap(), &[8, 3]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let data: Vec<TaskExample> = [Task::Gt, Task::Ioi, Task::Gp].iter().flat_map(|t| t.generate(5, 2).unwrap()).collect();
        let mut buf = Vec::new();
        write_jsonl(&data, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.lines().next().unwrap().contains("\"task\":\"gt\""));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), data);
        let bad = br#"{"clean":[1,2],"corrupt":[1],"answer_position":0,"spec":{"task":"gt","y_start":3}}"#;
        assert!(read_jsonl(&bad[..]).is_err());
    }

    #[test]
    fn target_tokens() {
        let vocab = v();
        assert_eq!(AnswerSpec::Gt { y_start: 97 }.target_tokens(vocab).unwrap(), vec![98, 99]);
        assert_eq!(AnswerSpec::Ioi { io_token: 120, s_token: 121 }.target_tokens(vocab).unwrap(), vec![120]);
        assert_eq!("ioi".parse::<Task>().unwrap(), Task::Ioi);
        assert!("xyz".parse::<Task>().is_err());
    }
}
